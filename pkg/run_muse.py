import sys

from muse_distill.dfkd.cli import main

if __name__ == "__main__":
    sys.exit(main())
