"""Smoke test for the pyimageset extension module.

Build the module first, either with maturin:

    maturin develop -m crates/py/Cargo.toml

or with cargo, in which case this script finds the library under target/:

    cargo build -p imageset-py --release --features extension-module
    python3 python/smoke_test.py
"""
import importlib.machinery
import importlib.util
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    try:
        import pyimageset

        return pyimageset
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libpyimageset.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("pyimageset", str(lib))
            spec = importlib.util.spec_from_file_location("pyimageset", lib, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("pyimageset not found; build it first (see the module docstring)")


def main():
    m = load_module()

    # holistic weights 0.2 / 0.3 / 0.5 over the row means
    h = m.holistic(0.520, 0.729, 0.756, 0.743, 0.359, 0.414, 0.356)
    assert abs(h - 0.515) <= 5e-4, h
    try:
        m.holistic(1.5, 0, 0, 0, 0, 0, 0)
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range score accepted")

    p = m.yes_probability([("Yes", 0.0), ("No", -2.0)])
    assert abs(p - 1 / (1 + math.exp(-2))) < 1e-12, p
    assert abs(m.yes_probability([(" Yes", -0.5), ("no", -0.5), ("Yes", -3.0)]) - 0.5) < 1e-12

    rows = [l for l in m.mask_dump([1, 2], 1, [1, 1]).splitlines() if not l.startswith("#")]
    assert rows == ["0--000", "-00000"], rows
    assert m.sliding_windows(7) == [[0, 1, 2, 3], [2, 3, 4, 5], [3, 4, 5, 6]]

    r = m.recaption("Generate 3 images: a red circle, a blue square and a red triangle. Keep the same style.")
    assert r["entities"] == ["a red circle", "a blue square", "a red triangle"], r
    assert r["consistency"] == ["Keep the same style"], r

    stats = m.corpus_stats(str(ROOT / "crates" / "core" / "data" / "sample_corpus.json"))
    assert stats["count"] == 12, stats

    with tempfile.TemporaryDirectory() as tmp:
        ck = pathlib.Path(tmp) / "model.ckpt"
        losses = m.train(str(ck), steps=20, seed=1)
        assert len(losses) == 20 and all(math.isfinite(l) for l in losses)
        a = m.generate(str(ck), "a green circle", n=2, steps=4, divide=1, seed=5)
        b = m.generate(str(ck), "a green circle", n=2, steps=4, divide=1, seed=5)
        assert a == b
        side = a["side"]
        assert len(a["images"]) == 2 and len(a["images"][0]) == side * side * 3
        assert all(0.0 <= v <= 1.0 for v in a["images"][0])

    print("pyimageset smoke test passed")


if __name__ == "__main__":
    main()
