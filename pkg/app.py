"""Entry script: `python app.py <command> [options]`."""
import sys

from traveltime.cli import main

if __name__ == "__main__":
    sys.exit(main())
