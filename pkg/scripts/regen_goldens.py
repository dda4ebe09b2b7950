"""Regenerate tests/golden/toy.json from the bundled toy assets.

Run after an intentional change to the toy model, tokenizer or corpus:

    python scripts/regen_goldens.py
"""

import json
import tempfile
from pathlib import Path

from neglab import cli, corpus, lenses, metrics
from neglab.model.toy import load_toy

GOLDEN = Path(__file__).resolve().parents[1] / "tests" / "golden" / "toy.json"
LENS_PROMPT = "An animal that is not an amphibian is a"
FLIP_TARGETS = [[], [0], [1], [2], [3], [0, 1, 2, 3]]


def main() -> None:
    model, tok = load_toy()
    entries = corpus.load_seed_corpus(tok)
    ids = corpus.prompt_ids(LENS_PROMPT, tok)
    scan = lenses.lens_scan(model, ids, range(model.config.n_layers), "ao", k=5)
    flips = metrics.flip_rate(entries, model, tok, [tuple(t) for t in FLIP_TARGETS])
    with tempfile.TemporaryDirectory() as d:
        assert cli.main(["windowed", "--out", d, "--window-width", "1"]) == 0
        windowed = (Path(d) / "windowed.csv").read_text()
    doc = {
        "encode_frog": tok.encode(" frog"),
        "eval": metrics.evaluate(entries, model, tok).summary(),
        "lens_scan": {
            "prompt": LENS_PROMPT,
            "promoted": [r.promoted_ids() for r in scan],
            "demoted": [r.demoted_ids() for r in scan],
        },
        "flip_rate": {"targets": FLIP_TARGETS, "rates": [f.rate for f in flips]},
        "windowed_w1_csv": windowed,
    }
    GOLDEN.parent.mkdir(parents=True, exist_ok=True)
    GOLDEN.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"wrote {GOLDEN}")


if __name__ == "__main__":
    main()
