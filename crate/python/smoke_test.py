"""Smoke test for the dlatent_py extension.

Build the extension first:

    cargo build -p dlatent-py --features extension-module

then run `python3 python/smoke_test.py`. Set DLATENT_PY_LIB to point at a
different build of the shared library.
"""

import importlib.util
import os
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_extension():
    lib = os.environ.get("DLATENT_PY_LIB")
    candidates = [pathlib.Path(lib)] if lib else [
        ROOT / "target" / profile / "libdlatent_py.so" for profile in ("debug", "release")
    ]
    found = [p for p in candidates if p.exists()]
    if not found:
        sys.exit("dlatent_py library not found; run `cargo build -p dlatent-py --features extension-module`")
    tmp = pathlib.Path(tempfile.mkdtemp())
    target = tmp / "dlatent_py.so"
    shutil.copy(max(found, key=lambda p: p.stat().st_mtime), target)
    spec = importlib.util.spec_from_file_location("dlatent_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    dl = load_extension()
    print("dlatent_py", dl.__version__)

    assert dl.tokenize("Hello, World!") == ["hello", ",", "world", "!"], dl.tokenize("Hello, World!")
    assert dl.bits_per_sentence("global", 16, 256) == 128

    docs = dl.synthetic_corpus(240, topics=4, seed=1)
    assert len(docs) == 240 and {label for _, _, label in docs} == {0, 1, 2, 3}
    vocab = dl.Vocabulary.build([dl.tokenize(text) for _, text, _ in docs])
    ids = [vocab.encode(text, 16) for _, text, _ in docs]
    assert vocab.decode(ids[0]) == dl.tokenize(docs[0][1])

    cfg = dl.TrainingConfig("hardem", layout="global", m=2, k=8, d_model=32, ffn=64,
                            max_len=16, max_steps=40, eval_every=20, batch_size=16)
    assert "method = hardem" in cfg.to_flat()
    model = dl.Model(cfg, vocab)
    outcome = model.pretrain(ids[:200], ids[200:], cfg)
    print("pretrain:", outcome)
    assert outcome["best_dev_perplexity"] > 1.0

    codes = model.encode(ids)
    assert all(len(c) == 1 and len(c[0]) == 2 for c in codes)
    blob = dl.pack_codes(2, 8, codes)
    assert blob[:4] == b"DLC1"
    assert dl.unpack_codes(blob) == (2, 8, codes)

    index = dl.CodeIndex(2, 8)
    for (doc_id, _, label), code in zip(docs[:200], codes[:200]):
        index.push(doc_id, code[0], label)
    hits = index.knn(codes[200][0], 5)
    assert len(hits) == 5 and [h[2] for h in hits] == sorted(h[2] for h in hits)
    assert all(d <= 1 for _, _, d in index.radius(codes[200][0], 1))

    with tempfile.TemporaryDirectory() as tmp:
        model.save(tmp)
        again = dl.Model.load(tmp, vocab)
        assert again.encode(ids[:10]) == codes[:10]
        other = dl.Vocabulary.build([["something", "else"]])
        try:
            dl.Model.load(tmp, other)
        except ValueError as e:
            assert "mismatch" in str(e)
        else:
            raise AssertionError("checkpoint accepted a different vocabulary")

    try:
        dl.TrainingConfig("vqvae", gamma=0.5)
    except ValueError:
        pass
    else:
        raise AssertionError("gamma accepted for vqvae")
    print("smoke test passed")


if __name__ == "__main__":
    main()
