#!/usr/bin/env python3
"""Validation script for the shipped refusion-desk presets and package layout."""

import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent
sys.path.insert(0, str(ROOT / "src"))

# Set encoding for Windows console
if sys.platform == "win32":
    import io
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8')

PRESETS = ("default", "motivation", "ablation-rankers", "query-mode", "sweeps", "full-data")


def validate_required_files(root: Path = ROOT):
    """Check all required package files exist."""
    from refusion_desk.const import DOMAIN

    package = root / "src" / DOMAIN
    required_files = [
        package / f"{name}.py"
        for name in (
            "__init__", "__main__", "const", "exceptions", "autodiff", "retriever", "fusion",
            "integrator", "model", "checkpoint", "trainer", "analyzer", "task", "config",
            "pipeline", "cli",
        )
    ]

    all_exist = True
    for path in required_files:
        if not path.exists():
            print(f"[FAIL] Missing required file: {path.relative_to(root)}")
            all_exist = False

    if all_exist:
        print("[OK] All required files present")

    return all_exist


def validate_presets(root: Path = ROOT):
    """Every preset must parse and survive a serialize/parse round trip."""
    from refusion_desk.config import load, parse
    from refusion_desk.exceptions import ConfigError

    all_valid = True
    for name in PRESETS:
        path = root / "presets" / f"{name}.conf"
        if not path.exists():
            print(f"[FAIL] Missing preset: {name}")
            all_valid = False
            continue
        try:
            config = load(path)
        except ConfigError as err:
            print(f"[FAIL] Preset {name} does not parse: {err}")
            all_valid = False
            continue
        if parse(config.serialize()) != config:
            print(f"[FAIL] Preset {name} does not round-trip")
            all_valid = False
            continue
        print(f"[OK] {name}: variant={config.variant} seeds={list(config.experiment.seeds)}")

    return all_valid


def validate_imports():
    """Check if key modules can be imported."""
    try:
        import numpy
        print(f"[OK] numpy available (v{numpy.__version__})")
    except ImportError as e:
        print(f"[FAIL] Failed to import numpy: {e}")
        return False

    try:
        import dotenv  # noqa: F401
        print("[OK] python-dotenv available")
    except ImportError as e:
        print(f"[FAIL] Failed to import python-dotenv: {e}")
        return False

    return True


def main():
    """Run all validations."""
    print("Validating refusion-desk presets\n")

    imports_ok = validate_imports()
    results = [imports_ok]
    if imports_ok:
        results.extend([validate_required_files(), validate_presets()])

    print("\n" + "=" * 50)
    if all(results):
        print("All validations passed!")
        return 0
    else:
        print("Some validations failed")
        print("Please fix the issues above")
        return 1


if __name__ == "__main__":
    sys.exit(main())
