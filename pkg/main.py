#!/usr/bin/env python3
"""
Repository entry point for jcimage
"""
import sys
from pathlib import Path

# Add the backend directory to the Python path
backend_path = Path(__file__).parent / "backend"
sys.path.insert(0, str(backend_path))

if __name__ == "__main__":
    from app.main import main

    sys.exit(main())
