"""Smoke test for the Python bindings.

Build and install first:  pip install --no-build-isolation ./crates/py
"""

import json

import dop

TINY = {
    "synthetic": {"domains": ["hotel", "taxi", "train"], "examples_per_domain": 24},
    "model": {"num_layers": 1, "d_model": 8, "num_heads": 2, "d_ff": 16,
              "max_encoder_len": 24, "max_decoder_len": 8, "d_m": 4},
    "lda": {"iterations": 20},
    "prefix_len": 6,
    "fit": {"epochs": 5},
    "train": {"epochs": 1, "batch_size": 4, "initial_lr": 0.01, "valid_limit": 2, "valid_max_tokens": 6},
    "valid_size": 4,
    "source_limit": 8,
    "eval_limit": 3,
    "seeds": [0],
}


def main():
    assert dop.serialize_state("book", [("people", "5"), ("day", "Monday")]) == "book, people is 5, day is Monday"

    s = dop.rouge("the cat sat", "the cat sat")
    assert all(abs(s[k][2] - 1.0) < 1e-12 for k in ("r1", "r2", "rl")), s

    cfg = json.dumps(TINY)
    corpus = dop.generate_corpus(cfg)
    assert len(corpus) == 72 and {"hotel", "taxi", "train"} == {e["domain"] for e in corpus}

    words = dop.domain_words(6, cfg)
    assert sorted(words) == ["hotel", "taxi", "train"] and all(len(w) == 6 for w in words.values())

    a = dop.train_prefix("taxi", 0, cfg)
    b = dop.train_prefix("taxi", 0, cfg)
    assert a == b, "runs differ"
    assert len(a["scores"]) == 3 and all(0.0 <= x <= 1.0 for x in a["scores"])
    print("smoke test passed:", [round(x, 4) for x in a["scores"]])


if __name__ == "__main__":
    main()
