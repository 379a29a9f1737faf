"""Import the compiled extension and run a small end-to-end check.

Build first with `cargo build -p cryptojack-py` (or `--release`). The script
copies the shared library next to a temporary `cryptojack.so` and imports it.
"""

import importlib
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def find_library():
    override = os.environ.get("CRYPTOJACK_LIB")
    if override:
        return Path(override)
    names = ["libcryptojack_py.so", "libcryptojack_py.dylib", "cryptojack_py.dll"]
    for profile in ("release", "debug"):
        for name in names:
            p = ROOT / "target" / profile / name
            if p.exists():
                return p
    sys.exit("extension not built; run `cargo build -p cryptojack-py`")


def load():
    lib = find_library()
    tmp = Path(tempfile.mkdtemp())
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    shutil.copy(lib, tmp / ("cryptojack" + suffix))
    sys.path.insert(0, str(tmp))
    return importlib.import_module("cryptojack")


def main():
    cj = load()

    miners, benign = cj.testbed_corpus(4, 30000.0, 2)
    res = cj.run_pipeline(miners + benign, miners + benign)
    assert len(res["active"]) == len(miners) == 24, res["active"]
    assert set(res["total"]) >= set(res["active"])

    top = miners[0].phase2()["top"]
    assert top["load_pct"] >= 10.0
    assert cj.decode_visit(miners[0].encode()).site == miners[0].site
    assert miners[0].wasm_codebase_hash() is not None

    est = cj.revenue_upper_bound(13.5e6)
    assert round(est["xmr_per_day"], 1) == 223.5
    assert cj.credited_hashes("ffffff00") == 256

    docs = ["a b c d e"] * 2 + ["v w x y z"] * 2
    assert cj.cluster(docs, n=2, cut_similarity=0.5) == [0, 0, 1, 1]

    rules = cj.FilterList("||coinhive.testbed.local^")
    hits = rules.detected_sites(miners + benign)
    assert hits and set(hits) <= set(res["active"])

    print("smoke ok: active=%d blacklisted=%d" % (len(res["active"]), len(hits)))


if __name__ == "__main__":
    main()
