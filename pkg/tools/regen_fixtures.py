"""Rebuild the recorded response and token tables from the scenario scripts.

Run after editing any fixtures/<name>.json or the prompt rendering:

    python tools/regen_fixtures.py            # rewrite all
    python tools/regen_fixtures.py --check    # exit 1 if anything would change
"""

from __future__ import annotations

import argparse
import sys

from tme.harness import SCENARIOS, dump_fixture, fixture_dir, regenerate


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("scenarios", nargs="*", default=list(SCENARIOS))
    parser.add_argument("--check", action="store_true", help="compare instead of writing")
    args = parser.parse_args(argv)

    root = fixture_dir()
    stale = []
    for name in args.scenarios:
        for filename, doc in regenerate(name, root).items():
            path = root / filename
            text = dump_fixture(doc)
            current = path.read_text(encoding="utf-8") if path.exists() else None
            if current == text:
                continue
            stale.append(filename)
            if not args.check:
                path.write_text(text, encoding="utf-8")
                print(f"wrote {path}")
    if args.check and stale:
        print("out of date: " + ", ".join(stale), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
