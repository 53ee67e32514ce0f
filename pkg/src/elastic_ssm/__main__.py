"""``python -m elastic_ssm`` dispatches to the command-line driver."""

from .cli import main

if __name__ == "__main__":
    raise SystemExit(main())
