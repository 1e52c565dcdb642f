"""
Check that required packages are installed. Run: python check_setup.py
"""
import sys


def main():
    missing = []
    try:
        import numpy
    except ImportError:
        missing.append("numpy")
    try:
        import scipy
    except ImportError:
        missing.append("scipy")

    if missing:
        print("Missing packages:", ", ".join(missing))
        print("\nInstall:")
        print("  python -m pip install -r requirements.txt")
        return 1

    try:
        import pytest
    except ImportError:
        print("pytest not found (only needed for the test suite):")
        print("  python -m pip install -r requirements-dev.txt")
    print("All dependencies installed. Run: python main.py --help")
    return 0


if __name__ == "__main__":
    sys.exit(main())
