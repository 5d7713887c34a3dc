#!/usr/bin/env python3
"""
Quick launcher script for Layout Lab.

This script provides a convenient way to run the harness from the project root.
"""

from src.harness import main

if __name__ == "__main__":
    main()
