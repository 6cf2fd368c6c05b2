"""Smoke test for the Python bindings and the command-line tool.

Builds the release artifacts (unless --no-build), imports the extension from
a temporary directory and checks it against the CLI on the same audio.

    python3 python/smoke_test.py
"""

import argparse
import importlib
import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
RELEASE = ROOT / "target" / "release"


def build():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "dccrn-kws", "-p", "dccrn-kws-py"],
        cwd=ROOT,
        check=True,
    )


def load_module(tmp: Path):
    shutil.copy(RELEASE / "libdccrn_kws_py.so", tmp / "dccrn_kws_py.so")
    sys.path.insert(0, str(tmp))
    return importlib.import_module("dccrn_kws_py")


def check_helpers(m):
    rng = np.random.default_rng(0)
    ref = rng.uniform(-1, 1, 4000).astype(np.float32)
    est = ref + 0.25 * rng.uniform(-1, 1, 4000).astype(np.float32)
    a = m.si_snr(est.tolist(), ref.tolist())
    b = m.si_snr((3.0 * est).tolist(), ref.tolist())
    assert abs(a - b) < 1e-4, (a, b)

    peak = m.noam_lr(1000)
    assert abs(peak - 5.0 / math.sqrt(128) / math.sqrt(1000)) < 1e-12
    assert m.noam_lr(999) < peak and m.noam_lr(1001) < peak

    labels = m.frame_labels(120, 100)
    assert labels.count(1) == 10 and labels.count(0) == 0
    assert m.frame_labels(50) == [0] * 50

    try:
        m.si_snr([1.0], [1.0, 2.0])
    except ValueError:
        pass
    else:
        raise AssertionError("length mismatch was accepted")


def cli(*args, stdin=None):
    out = subprocess.run(
        [str(RELEASE / "dccrn-kws"), *map(str, args)],
        input=stdin,
        capture_output=True,
        check=True,
    )
    return out.stdout.decode()


def check_detector(m, tmp: Path):
    train, _test = m.toy_corpus(tmp / "toy", seed=3)
    cli("train", "--train-manifest", train, "--iterations", 2, "--out-dir", tmp / "run")
    det = m.Detector(str(tmp / "run" / "latest.bin"))
    rate = det.sample_rate

    t = np.arange(int(1.5 * rate)) / rate
    tone = 0.3 * np.sin(2 * np.pi * 200 * t) * (t > 0.4) * (t < 0.9)
    pcm = np.round(tone * 32768).clip(-32768, 32767).astype("<i2")
    samples = (pcm.astype(np.float32) / 32768).tolist()

    whole = det.posterior(samples)
    streamed = det.stream_posterior(samples, 37)
    assert len(whole) == len(streamed) > 0
    assert max(abs(x - y) for x, y in zip(whole, streamed)) < 1e-5

    ours = det.detect(samples, threshold=0.0)
    lines = cli(
        "stream", "--checkpoint", tmp / "run" / "latest.bin", "--threshold", 0, stdin=pcm.tobytes()
    ).splitlines()
    assert [int(l.split("\t")[0]) for l in lines] == [f for f, _ in ours], (lines, ours)
    return len(whole), len(ours)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--no-build", action="store_true")
    args = ap.parse_args()
    if not args.no_build:
        build()
    with tempfile.TemporaryDirectory() as d:
        tmp = Path(d)
        m = load_module(tmp)
        check_helpers(m)
        frames, dets = check_detector(m, tmp)
    print(f"ok: helpers, detector ({frames} frames, {dets} detections), cli stream agrees")


if __name__ == "__main__":
    main()
