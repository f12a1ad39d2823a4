"""Regenerate the golden serialized forms of the vectorized worked examples.

Run from the repository root::

    python3 tests/make_golden.py

Review the diff before committing: these files pin the exact generated
graphs, so any change to the converter output shows up here.
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from pforvec import dumps, vectorize_graph  # noqa: E402
from worked_examples import GOLDEN_EXAMPLES  # noqa: E402


def main():
    out_dir = pathlib.Path(__file__).parent / "golden"
    out_dir.mkdir(exist_ok=True)
    for name, build in GOLDEN_EXAMPLES.items():
        g, _ = vectorize_graph(build())
        path = out_dir / f"{name}.pfg"
        path.write_text(dumps(g))
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
