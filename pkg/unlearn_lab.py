#!/usr/bin/env python3
import os
import sys

# Absoluter Pfad zum Basisverzeichnis
BASE_DIR = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, BASE_DIR)

from unlearnlab.cli import main  # noqa: E402

if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\nProgramm durch Benutzer beendet")
        sys.exit(130)
