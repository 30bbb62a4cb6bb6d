"""Smoke test for the scisent Python extension.

Build and install first, e.g.:
    cd crates/python && maturin develop   (inside a virtualenv)
or
    cd crates/python && maturin build -o dist && pip install dist/*.whl
"""

import json
import os
import tempfile

import scisent_py as s


def main():
    cats = s.categories()
    assert cats[0] == "Overall" and cats[1] == "Research Gap" and len(cats) == 7

    assert s.parse_label("research gap.") == "Research Gap"
    try:
        s.parse_label("Methodology")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown label accepted")

    assert s.parse_response("CATEGORY: Limitation") == "Limitation"
    assert s.parse_response("no idea") is None

    prompt = s.build_prompt("Their model ignores long documents.")
    assert "Their model ignores long documents." in prompt

    assert s.normalized_levenshtein("kitten", "sitting") == 3 / 7
    assert not s.gate_variant("abcdefghij", "XYcdefghij")
    assert s.gate_variant("abcdefghij", "XYZdefghij")

    assert abs(s.fleiss_kappa([[3, 0], [1, 2]]) - 0.25) < 1e-9
    assert abs(s.gwet_ac1([[3, 0], [1, 2]]) - 0.40) < 1e-9

    macro, per = s.evaluate(["Overall", "Result", "Other"], ["Overall", "Result", None])
    assert per["Overall"]["f1"] == 1.0
    assert per["Other"]["recall"] == 0.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "mini.jsonl")
        with open(path, "w") as f:
            n = 0
            for c in cats:
                for _ in range(10):
                    n += 1
                    f.write(json.dumps({"id": f"s{n:03}", "text": f"Sentence {n}.", "label": c, "provenance": "manual"}) + "\n")
        ds = s.Dataset.load(path)
        assert len(ds) == 70 and ds.name == "mini"
        split = ds.split(seed=1)
        assert split.split_counts() == {"train": 49, "validation": 7, "test": 14}
        assert split.validate("none") == []
        assert split.validate("base")  # too small for the base profile

    print("python smoke test passed")


if __name__ == "__main__":
    main()
