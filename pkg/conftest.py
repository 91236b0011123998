import sys
import os

# Make the powerstack package importable when pytest runs from the repository root
_root = os.path.dirname(os.path.abspath(__file__))
if _root not in sys.path:
    sys.path.insert(0, _root)
