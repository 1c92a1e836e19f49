"""Smoke test for the localmt extension module.

Build and run from the repository root:

    cargo build -p localmt-python --release
    cp target/release/liblocalmt_py.so python/localmt.so
    python3 python/smoke_test.py
"""

import json
import os
import random
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import localmt  # noqa: E402


def check_quantized_matmul():
    rng = random.Random(1)
    b = [[rng.uniform(-1, 1) for _ in range(5)] for _ in range(7)]
    a = [[rng.uniform(-1, 1) for _ in range(7)] for _ in range(3)]
    q = localmt.QuantizedMatrix(b)
    assert q.shape == (7, 5)
    for row in q.values():
        assert all(-127 <= v <= 127 for v in row)
    out = q.matmul(a, bias=[0.5] * 5)
    exact = [[sum(a[i][k] * b[k][j] for k in range(7)) + 0.5 for j in range(5)] for i in range(3)]
    worst = max(abs(x - y) for ro, re in zip(out, exact) for x, y in zip(ro, re))
    assert worst < 0.1, worst


def check_text_roundtrips():
    vocab = localmt.Vocabulary(["the", " qu", "ick"])
    assert len(vocab) == 259 + 3
    for text in ["", "the quick brown fox", "café ☃ \U0001f600\n\t"]:
        assert vocab.detokenize(vocab.tokenize(text)) == text
    raw = bytes([0xFF, 0x00, 0xC3])
    assert vocab.detokenize_bytes(vocab.tokenize_bytes(raw)) == raw

    text = "  Dr. Smith arrived.  He left!\n\nNew para?"
    gaps, sentences = localmt.split_sentences(text)
    assert len(gaps) == len(sentences) + 1
    assert localmt.reassemble(gaps, sentences) == text


def check_shortlist():
    sl = localmt.Shortlist.build([(10, 20, 5), (10, 21, 3), (11, 22, 1)], f=1, k=2, vocab_size=64)
    again = localmt.Shortlist.deserialize(sl.serialize())
    assert again.candidates([10, 11]) == sl.candidates([10, 11])
    assert set(sl.candidates([10], specials=[0, 1, 2])) >= {0, 1, 2}


def check_translation_and_store():
    with tempfile.TemporaryDirectory() as tmp:
        copy = localmt.Translator("copy", data_dir=tmp, threads=1)
        text = "First sentence. Second one!\n\n  Third?"
        assert copy.translate(text) == text
        report = json.loads(copy.bench("one two three.\nfour five.\n", pre_split=True))
        assert report["words"] == 5 and report["sentences"] == 2

        pkg = os.path.join(tmp, "demo.tgz")
        localmt.make_demo_package("demo", pkg, seed=3)
        store = localmt.Store(os.path.join(tmp, "data"))
        assert store.import_archive(pkg) == "demo"
        assert store.list() == [("demo", "1.0.0", "Demo model demo")]
        store.verify("demo")
        out = localmt.Translator("demo", data_dir=os.path.join(tmp, "data"), threads=1).translate("Hello there.")
        assert isinstance(out, str)
        assert store.delete("demo") == 1
        try:
            store.verify("demo")
        except KeyError:
            pass
        else:
            raise AssertionError("deleted model still resolves")


def main():
    print("localmt", localmt.__version__)
    for check in (check_quantized_matmul, check_text_roundtrips, check_shortlist, check_translation_and_store):
        check()
        print("ok", check.__name__)


if __name__ == "__main__":
    main()
