import logging
import sys

from app.api.cli import main as cli_main
from app.config import settings

logging.basicConfig(
    level=settings.LOG_LEVEL,
    format="%(levelname)s [%(asctime)s] [%(name)s] - %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)


def main(argv: list[str] | None = None) -> int:
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
