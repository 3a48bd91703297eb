"""Regenerate the committed fixtures under tests/fixtures.

    python tests/make_fixtures.py

The golden report is produced by running the pipeline once; rerun this only
when a behavior change is intended, and review the diff.
"""

from __future__ import annotations

import hashlib
import json
import shutil
import sys
import tempfile
from pathlib import Path

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE))

from walkthrough_cases import write_uncommon_case  # noqa: E402
from worlds import golden_world  # noqa: E402

from refeval.cli import main  # noqa: E402
from refeval.core import unit_id  # noqa: E402
from refeval.storage import write_jsonl  # noqa: E402

FIXTURES = HERE / "fixtures"


def manifest(corpus: Path) -> dict:
    out = {}
    for f in sorted(corpus.iterdir()):
        data = f.read_bytes()
        out[f.name] = {"bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()}
    return out


def annotations(world) -> list[dict]:
    """Three annotators; the third disagrees on every fifth unit, adherence is doubted now and then."""
    out = []
    for i, (topic, fact) in enumerate((t, f) for t in world.topics for f in t.facts):
        uid = unit_id(topic.doc_id, fact.keyword, fact.description)
        truth = int(fact.verdict == "correct")
        for a in ("a1", "a2", "a3"):
            label = 1 - truth if a == "a3" and i % 5 == 0 else truth
            adhered = not (a != "a1" and i % 7 == 3)
            out.append({"item_id": uid, "annotator_id": a, "label": label, "adhered_to_reference": adhered})
    return out


def make_golden() -> None:
    root = FIXTURES / "golden"
    shutil.rmtree(root, ignore_errors=True)
    world = golden_world()
    world.write(root, annotations="annotations.jsonl")
    write_jsonl(root / "annotations.jsonl", annotations(world))
    (root / "manifest.json").write_text(json.dumps(manifest(root / "corpus"), indent=2, sort_keys=True) + "\n")
    with tempfile.TemporaryDirectory() as tmp:
        work = Path(tmp) / "golden"
        shutil.copytree(root, work)
        cfg = str(work / "config.json")
        for cmd in ("ingest", "extract", "run"):
            if main([cmd, "--config", cfg]) != 0:
                raise SystemExit(f"{cmd} failed")
        shutil.copytree(work / "run" / "report", root / "expected_report")


if __name__ == "__main__":
    make_golden()
    write_uncommon_case(FIXTURES / "uncommon")
    print(f"fixtures written to {FIXTURES}")
