"""Smoke test for the hierdraft_py extension.

Build and run:

    cargo build --release -p hierdraft-py --features extension-module
    cp target/release/libhierdraft_py.so python/hierdraft_py.so
    python3 python/smoke_test.py
"""

import json
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import hierdraft_py as hd  # noqa: E402

PASSAGE = " ".join(f"p{i}" for i in range(30))


def main():
    train = [" ".join([PASSAGE] * 4)]
    vocab = hd.Vocab.build(train)
    assert len(vocab) == 33, len(vocab)
    assert vocab.tokenize("p0 p1") == [3, 4]
    assert vocab.detokenize([3, 4, hd.EOS]) == "p0 p1"

    model = hd.KGramModel.fit(train, vocab, k=3, alpha=0.01)
    probs = model.next_distribution([3, 4])
    assert abs(sum(probs) - 1.0) < 1e-9
    assert model.greedy_next([3, 4]) == 5

    stats = hd.StatsDb.build(train, vocab)
    assert stats.count([3, 4]) == 4
    assert stats.retrieve([3, 4], 4, 1) == [([5, 6, 7, 8], 4)]
    mdb = hd.ModelDb.build(train, vocab, top_k=100, m=4)
    assert mdb.lookup(3, 1) == [[4, 5, 6, 7]]

    ctx = hd.ContextDb(max_values_per_key=2, value_len=2, capacity=3)
    assert ctx.insert(9, [1]) is None
    ctx.insert(9, [2])
    assert ctx.insert(9, [3]) == (9, [1])
    assert ctx.lookup(9, 5) == [[3], [2]]

    prompt = vocab.tokenize(PASSAGE + " " + PASSAGE)
    out = hd.decode(model, prompt, model_db=mdb, stats_db=stats, max_tokens=100, trace=True)
    ar = hd.autoregressive_decode(model, prompt, max_tokens=100)
    assert out.tokens == ar.tokens
    assert out.steps == 20 and out.tau == 5.0, out
    assert ar.steps == 100
    metrics = json.loads(out.metrics_json())
    assert metrics["tallies"]["c"]["verify_success"] == 20
    assert len(out.trace_jsonl().splitlines()) == 21

    sampled = hd.decode(model, prompt, databases="c,s", stats_db=stats, temperature=1.0, max_tokens=50, seed=3)
    again = hd.decode(model, prompt, databases="c,s", stats_db=stats, temperature=1.0, max_tokens=50, seed=3)
    assert sampled.tokens == again.tokens

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "s.hdsa")
        stats.save(path)
        assert hd.StatsDb.load(path, verify=True).count([3, 4]) == 4
        with open(path, "r+b") as f:
            f.write(b"XXXX")
        try:
            hd.StatsDb.load(path)
        except ValueError:
            pass
        else:
            raise AssertionError("corrupt file loaded")

    try:
        hd.decode(model, prompt, databases="c,s")
    except ValueError as e:
        assert "statistics database" in str(e)
    else:
        raise AssertionError("missing database accepted")

    print("ok", out)


if __name__ == "__main__":
    main()
