#!/usr/bin/env python3
"""
Runner for the jcimage command line, usable from the backend directory
"""
import sys

from app.main import main

if __name__ == "__main__":
    sys.exit(main())
