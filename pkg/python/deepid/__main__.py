import sys

from deepid.cli import main


def _run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    _run()
