"""
Simple script to validate Python imports and syntax.
Run this to check if all dependencies are available and the package imports cleanly.
"""
import importlib
import json
import sys
from pathlib import Path

THIRD_PARTY = [
    ("numpy", "NumPy", "numpy"),
    ("scipy.sparse", "SciPy", "scipy"),
    ("pandas", "pandas", "pandas"),
    ("sklearn.linear_model", "scikit-learn", "scikit-learn"),
    ("joblib", "joblib", "joblib"),
    ("pytest", "PyTest", "pytest"),
]

PROJECT_MODULES = [
    "utils.rng_factory",
    "utils.logging_config",
    "offpolicy.errors",
    "offpolicy.mdp_core",
    "offpolicy.environments",
    "offpolicy.model_fit",
    "offpolicy.estimators",
    "offpolicy.theory",
    "offpolicy.dataset_io",
    "offpolicy.config",
    "offpolicy.experiments",
    "offpolicy.bench_cli",
]


def validate_imports():
    """Check if all required imports work."""
    errors = []

    for module, label, package in THIRD_PARTY:
        try:
            importlib.import_module(module)
            print(f"✓ {label}: OK")
        except ImportError:
            errors.append(f"{package} not installed")
            print(f"✗ {label}: NOT INSTALLED (run: pip install {package})")

    for module in PROJECT_MODULES:
        try:
            importlib.import_module(module)
            print(f"✓ {module}: OK")
        except ImportError as e:
            errors.append(f"{module} import error: {e}")
            print(f"✗ {module}: FAILED - {e}")

    for test_file in sorted(Path("tests").glob("test_*.py")):
        module = f"tests.{test_file.stem}"
        try:
            importlib.import_module(module)
            print(f"✓ {module}: OK")
        except ImportError as e:
            errors.append(f"{module} import error: {e}")
            print(f"✗ {module}: FAILED - {e}")

    data_path = Path("data") / "test_data.json"
    try:
        with open(data_path, "r", encoding="utf-8") as f:
            json.load(f)
        print("✓ test_data.json: OK (valid JSON)")
    except FileNotFoundError:
        errors.append("test_data.json not found")
        print("✗ test_data.json: NOT FOUND")
    except json.JSONDecodeError as e:
        errors.append(f"test_data.json invalid JSON: {e}")
        print(f"✗ test_data.json: INVALID JSON - {e}")

    print("\n" + "=" * 50)
    if errors:
        print(f"Validation FAILED with {len(errors)} error(s):")
        for error in errors:
            print(f"  - {error}")
        return False
    print("Validation PASSED: All imports and files are OK!")
    return True


if __name__ == "__main__":
    success = validate_imports()
    sys.exit(0 if success else 1)
