"""python -m banditgnn"""

from .cli import main

main()
