"""Allow running as: python -m neonet"""

from .cli import main

main()
