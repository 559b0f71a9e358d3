import sys
from pathlib import Path

# let the suite run without an install
sys.path.insert(0, str(Path(__file__).parent / "src"))
