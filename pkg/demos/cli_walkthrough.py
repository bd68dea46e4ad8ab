# The four command-line stages on a small world, driven from Python.
#
# Equivalent shell session:
#   semloc gen-world world.toml data
#   semloc build-graph data db/graph.json
#   semloc localize data db/graph.json loc/trials.csv
#   semloc eval loc/trials.csv eval
#
# The query here is the database drive itself, so nearly every window should
# land on its true position.

import sys
import tempfile
from pathlib import Path

from semloc.cli import main

SPEC = """\
[world]
extent = 135.0
buildings = 20
trees = 24
cars = 8
fences = 8
signs = 8
rng_seed = 1

[trajectory]
kind = "forward"
path = [[5, 45], [130, 45]]

[camera]
width = 80
height = 60
fx = 50.0
"""

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="semloc-"))
root.mkdir(parents=True, exist_ok=True)
(root / "world.toml").write_text(SPEC)

steps = [
    ["gen-world", str(root / "world.toml"), str(root / "data")],
    ["build-graph", str(root / "data"), str(root / "db" / "graph.json")],
    ["localize", str(root / "data"), str(root / "db" / "graph.json"), str(root / "loc" / "trials.csv")],
    ["eval", str(root / "loc" / "trials.csv"), str(root / "eval")],
]
for argv in steps:
    print("$ semloc", " ".join(argv))
    code = main(argv)
    if code:
        sys.exit(code)

print()
print((root / "eval" / "pr.csv").read_text())
print("outputs under", root)
