"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line (visible even under output
capture) before asserting.  The long-running criteria (6, 7, 8, 11) are marked
``slow``; deselect them with ``-m "not slow"``.
"""
import dataclasses
import json
import subprocess
import sys
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bxlstm_petct.autodiff import Tensor, conv3d, no_grad, precision, use_tape
from bxlstm_petct.autodiff import conv as conv_mod
from bxlstm_petct.data import load_samples
from bxlstm_petct.inference import ALL_FLIPS, sliding_window, tta_predict
from bxlstm_petct.mae import MaeConfig, mae_loss, mask_volume, pretrain, read_log
from bxlstm_petct.metrics import connected_components, dice, false_volumes
from bxlstm_petct.network import NetworkConfig, build, load_checkpoint, read_checkpoint, save_checkpoint
from bxlstm_petct.phantom import PhantomSpec, generate_corpus
from bxlstm_petct.selfcheck import COMPOSITE_TOL, OP_TOL, run_suite
from bxlstm_petct.training import PUBLISHED_REFERENCE, TrainConfig, evaluate_samples, finetune, make_splits
from bxlstm_petct.metrics import aggregate
from bxlstm_petct.volume_io import Volume, read_volume, write_volume
from bxlstm_petct.xlstm import MlstmState, MlstmWeights, mlstm_step, mlstm_step_naive

from oracles import brute_dice, brute_false_volumes, naive_conv3d, random_mask_pair

# criterion 8 budget: fixed fold of a fixed corpus, small patch, and a fine-tuning budget short
# enough that scratch training has not saturated on these easy phantoms
SSL_SEEDS = 5
SSL_CORPUS = 10
SSL_PATCH = (16, 24, 24)
SSL_PRETRAIN_STEPS = 300
SSL_FINETUNE_STEPS = 50


_reported = set()


@pytest.fixture(autouse=True)
def _fail_line_on_error(request, capsys):
    # a criterion that raises before reaching its verdict still gets its FAIL line
    yield
    n = int(request.node.name.split("_")[2])
    if n not in _reported:
        with capsys.disabled():
            print(f"\nFAIL criterion {n:2d}: raised before completing", flush=True)


def verdict(capsys, n, title, ok, detail):
    _reported.add(n)
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n:2d} {title}: {detail}", flush=True)
    assert ok, f"criterion {n} ({title}) failed: {detail}"


def test_criterion_01_gradient_suite(capsys):
    t0 = time.perf_counter()
    results = run_suite(points=5, seed=0)
    elapsed = time.perf_counter() - t0
    bad = [f"{r.name}={r.error:.2e}" for r in results if not r.ok]
    assert {r.tol for r in results} <= {OP_TOL, COMPOSITE_TOL}
    assert any(r.name == "network_dice_ce" for r in results)
    worst = max(results, key=lambda r: r.error / r.tol)
    detail = f"{len(results)} checks, worst {worst.name} {worst.error:.2e}/{worst.tol:.0e}, {elapsed:.0f}s"
    verdict(capsys, 1, "gradient suite", not bad and elapsed < 300, detail + (f", failing: {bad}" if bad else ""))


def test_criterion_02_convolution_oracle(capsys, monkeypatch):
    rng = np.random.default_rng(2024)
    mismatches, per_path = 0, {"row_kernel": 0, "im2col": 0}
    for i in range(200):
        path = "row_kernel" if i % 2 == 0 else "im2col"
        monkeypatch.setattr(conv_mod, "ROW_KERNEL_MIN_WIDTH", 1 if path == "row_kernel" else 10**9)
        n, ci, co = (int(v) for v in (rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 5)))
        k = tuple(int(rng.choice([1, 3])) for _ in range(3))
        spatial = tuple(int(rng.integers(kk, 8)) for kk in k)
        stride = (1, 1, 1) if path == "row_kernel" else tuple(int(rng.choice([1, 2])) for _ in range(3))
        padding = tuple(int(rng.integers(0, kk)) for kk in k)
        x = rng.standard_normal((n, ci) + spatial).astype(np.float32)
        w = rng.standard_normal((co, ci) + k).astype(np.float32)
        got = conv3d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
        ref = naive_conv3d(x, w, stride, padding)
        if got.shape != ref.shape or not np.array_equal(got, ref):
            mismatches += 1
        per_path[path] += 1
    verdict(capsys, 2, "conv3d vs naive loops", mismatches == 0, f"{mismatches}/200 mismatches, paths {per_path}")


def test_criterion_03_metric_oracle(capsys):
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(1000):
        pred, gt = random_mask_pair(rng, max_side=8)
        if dice(pred, gt) != brute_dice(pred, gt) or false_volumes(pred, gt) != brute_false_volumes(pred, gt):
            bad += 1
    corner = np.zeros((2, 2, 2))
    corner[0, 0, 0] = corner[1, 1, 1] = 1
    edge = np.zeros((2, 2, 2))
    edge[0, 0, 0] = edge[0, 1, 1] = 1
    pinned = (
        len(connected_components(corner, 26)[1]) == 1
        and len(connected_components(corner, 18)[1]) == 2
        and len(connected_components(corner, 6)[1]) == 2
        and len(connected_components(edge, 18)[1]) == 1
        and len(connected_components(edge, 6)[1]) == 2
    )
    # a predicted voxel touching a GT voxel only at a corner: one 26-component, not a false positive
    gt = np.zeros((3, 3, 3))
    gt[0, 0, 0] = 1
    pred = np.zeros_like(gt)
    pred[0, 0, 0] = pred[1, 1, 1] = 1
    pinned = pinned and false_volumes(pred, gt) == (0.0, 0.0)
    verdict(capsys, 3, "metric oracle", bad == 0 and pinned, f"{bad}/1000 mismatches, corner cases pinned={pinned}")


def _gate_weights(d):
    # gate preactivations are +-50 driven by the sign of two dedicated input channels
    w = MlstmWeights(np.random.default_rng(4), d).astype(np.float64)
    params = dict(w.named_parameters())
    for name in ("w_i", "w_f", "b_i", "b_f"):
        params[name].data[:] = 0
    params["w_i"].data[0, 0] = 50.0
    params["w_f"].data[1, 0] = 50.0
    return w


def test_criterion_04_mlstm_stability(capsys):
    d, T = 4, 512
    rng = np.random.default_rng(5)
    xs = rng.standard_normal((T, d))
    xs[:, :2] = rng.choice([-1.0, 1.0], (T, 2))
    w = _gate_weights(d)
    finite_64 = finite_32 = True
    worst, compared = 0.0, 0
    naive = MlstmState(np.zeros((d, d)), np.zeros(d), np.zeros(()))
    naive_ok = True
    with precision(np.float64):
        state = MlstmState.zeros(1, d, np.float64)
        for x in xs:
            state, h = mlstm_step(state, x[None], w)
            finite_64 &= bool(np.all(np.isfinite(h.data)) and np.all(np.isfinite(state.C)) and np.all(np.isfinite(state.n)))
            if naive_ok:
                with np.errstate(over="ignore", invalid="ignore"):
                    naive, h_ref = mlstm_step_naive(naive, x, w)
                naive_ok = bool(np.all(np.isfinite(naive.C)) and np.all(np.isfinite(naive.n)) and np.all(np.isfinite(h_ref)))
                if naive_ok:
                    rel = np.abs(h.data[0] - h_ref) / np.maximum(np.abs(h_ref), 1e-300)
                    worst = max(worst, float(np.max(np.where(h_ref == 0, np.abs(h.data[0]), rel))))
                    compared += 1
    w32 = w.astype(np.float32)
    state = MlstmState.zeros(1, d, np.float32)
    for x in xs.astype(np.float32):
        state, h = mlstm_step(state, x[None], w32)
        finite_32 &= bool(np.all(np.isfinite(h.data)) and np.all(np.isfinite(state.C)))
    ok = finite_64 and finite_32 and compared > 0 and worst < 1e-5
    detail = f"finite64={finite_64} finite32={finite_32}, naive finite for {compared}/{T} steps, worst rel diff {worst:.2e}"
    verdict(capsys, 4, "mLSTM stability", ok, detail)


def test_criterion_05_residual_identity(capsys):
    cfg = NetworkConfig(stages=3, base_channels=4, patch_dims=(8, 16, 8), seed=5)
    x = Tensor(np.random.default_rng(6).standard_normal((2, 2, 8, 16, 8)).astype(np.float32))
    outs, shared = {}, None
    for placement in ("none", "enc", "bot"):
        model = build(dataclasses.replace(cfg, xlstm_placement=placement))
        params = dict(model.named_parameters())
        for name, p in params.items():
            if ".xlstm.fwd." in name or ".xlstm.bwd." in name:
                p.data[:] = 0
        plain = {n: p.data for n, p in params.items() if ".xlstm." not in n}
        if shared is None:
            shared = plain
        assert plain.keys() == shared.keys() and all(np.array_equal(plain[n], shared[n]) for n in plain)
        with no_grad():
            outs[placement] = model(x).data
    same = np.array_equal(outs["none"], outs["enc"]) and np.array_equal(outs["none"], outs["bot"])
    verdict(capsys, 5, "residual identity", same, "enc/bot/none logits bit-identical" if same else "logits differ")


@pytest.mark.slow
def test_criterion_06_overfit(capsys, tmp_path):
    corpus = tmp_path / "corpus"
    generate_corpus(PhantomSpec(seed=6), 2, corpus)
    samples = load_samples(corpus, ["case_000", "case_001"])
    splits = [{"train": ["case_000", "case_001"], "val": ["case_000", "case_001"]}]
    cfg = TrainConfig(steps=2000, augment=False, val_every=500, seed=0)
    t0 = time.perf_counter()
    result = finetune(splits, 0, corpus, NetworkConfig(), cfg, train_samples=samples, val_samples=samples)
    elapsed = time.perf_counter() - t0
    score = aggregate(evaluate_samples(result["model"], samples))["dice"]
    trace = ", ".join(f"{v['step'] + 1}:{v['dice']:.3f}" for v in result["validation"])
    ok = score > 0.95 and elapsed < 1800
    verdict(capsys, 6, "overfit 2 phantoms", ok, f"training Dice {score:.4f} after 2000 steps ({trace}), {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_criterion_07_mae_convergence(capsys, tmp_path):
    corpus = tmp_path / "corpus"
    generate_corpus(PhantomSpec(seed=7), 10, corpus)
    log = pretrain(corpus, NetworkConfig(), MaeConfig(seed=0), 500, tmp_path / "mae.ckpt")
    first = float(np.mean([r["loss"] for r in log[:50]]))
    last = float(np.mean([r["loss"] for r in log[-50:]]))

    # exclusivity: the loss gradient is exactly zero on every unmasked voxel
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 2, 16, 16, 16)).astype(np.float32)
    _, ind = mask_volume(x, MaeConfig(), rng)
    recon = Tensor(rng.standard_normal(x.shape).astype(np.float32), requires_grad=True)
    with use_tape() as tape:
        tape.backward(mae_loss(recon, x, ind))
    off = np.broadcast_to(ind[:, None] == 0, x.shape)
    exclusive = bool(np.all(recon.grad[off] == 0.0)) and bool(np.all(recon.grad[~off] != 0.0))
    ok = len(log) == 500 and last * 2 <= first and exclusive
    verdict(capsys, 7, "MAE convergence", ok, f"mean loss first 50 {first:.4f}, last 50 {last:.4f} ({first / last:.2f}x), exclusivity={exclusive}")


@pytest.mark.slow
def test_criterion_08_ssl_transfer_direction(capsys, tmp_path):
    corpus = tmp_path / "corpus"
    generate_corpus(PhantomSpec(seed=11), SSL_CORPUS, corpus)
    names = [f"case_{i:03d}" for i in range(SSL_CORPUS)]
    splits = make_splits(names, 5, 0)
    train, val = load_samples(corpus, splits[0]["train"]), load_samples(corpus, splits[0]["val"])
    rows = []
    for seed in range(SSL_SEEDS):
        net = NetworkConfig(patch_dims=SSL_PATCH, seed=seed)
        ckpt = tmp_path / f"mae_{seed}.ckpt"
        pretrain(corpus, net, MaeConfig(seed=seed), SSL_PRETRAIN_STEPS, ckpt)
        tc = TrainConfig(steps=SSL_FINETUNE_STEPS, val_every=SSL_FINETUNE_STEPS, seed=seed)
        scratch = finetune(splits, 0, corpus, net, tc, train_samples=train, val_samples=val)["validation"][-1]["dice"]
        ssl = finetune(splits, 0, corpus, net, tc, init=ckpt, train_samples=train, val_samples=val)["validation"][-1]["dice"]
        rows.append({"seed": seed, "scratch": scratch, "mae_init": ssl})
    mean_scratch = float(np.mean([r["scratch"] for r in rows]))
    mean_ssl = float(np.mean([r["mae_init"] for r in rows]))
    ref = PUBLISHED_REFERENCE
    report = {
        "seeds": rows,
        "mean_scratch": mean_scratch,
        "mean_mae_init": mean_ssl,
        "delta": mean_ssl - mean_scratch,
        "published_delta": {k: round(ref[k]["dice"] - ref["scratch"]["dice"], 3) for k in ("enc_ssl", "bot_ssl")},
    }
    (tmp_path / "ssl_transfer.json").write_text(json.dumps(report, indent=2))
    with capsys.disabled():
        for r in rows:
            print(f"  seed {r['seed']}: scratch {r['scratch']:.4f}  mae-init {r['mae_init']:.4f}")
    detail = (
        f"mean val Dice scratch {mean_scratch:.4f} vs MAE init {mean_ssl:.4f} (delta {mean_ssl - mean_scratch:+.4f}); "
        f"published {ref['scratch']['dice']} -> {ref['bot_ssl']['dice']} (delta +{ref['bot_ssl']['dice'] - ref['scratch']['dice']:.3f})"
    )
    verdict(capsys, 8, "SSL transfer direction", mean_ssl >= mean_scratch, detail)


def test_criterion_09_round_trips(capsys, tmp_path):
    cfg = NetworkConfig(stages=2, base_channels=3, patch_dims=(8, 8, 8), seed=9)
    model = build(cfg)
    save_checkpoint(model, tmp_path / "m.ckpt", "finetuned")
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    a, b = dict(model.named_parameters()), dict(loaded.named_parameters())
    ckpt_ok = a.keys() == b.keys() and all(a[n].data.tobytes() == b[n].data.tobytes() for n in a)
    save_checkpoint(loaded, tmp_path / "m2.ckpt", "finetuned")
    ckpt_ok = ckpt_ok and (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
    ckpt_ok = ckpt_ok and read_checkpoint(tmp_path / "m.ckpt")[0]["stage"] == "finetuned"

    rng = np.random.default_rng(9)
    vvol_ok = True
    for kind in ("CT", "PET", "MASK"):
        data = rng.standard_normal((5, 7, 3)).astype(np.float32)
        if kind == "MASK":
            data = (data > 0).astype(np.float32)
        vol = Volume(data, (0.7, 1.0, 2.5), kind)
        write_volume(vol, tmp_path / f"{kind}.vvol")
        back = read_volume(tmp_path / f"{kind}.vvol")
        vvol_ok &= back.data.tobytes() == data.tobytes() and back.spacing == vol.spacing and back.kind == kind

    @settings(max_examples=200, deadline=None)
    @given(st.integers(5, 80), st.integers(0, 2**32 - 1))
    def splits_hold(n, seed):
        names = [f"c{i:03d}" for i in range(n)]
        folds = make_splits(names, 5, seed)
        vals = [v for f in folds for v in f["val"]]
        good = sorted(vals) == names and len(folds) == 5
        for f in folds:
            good &= not set(f["train"]) & set(f["val"]) and sorted(f["train"] + f["val"]) == names
            good &= len(f["val"]) in (n // 5, -(-n // 5))
        good &= folds == make_splits(names, 5, seed)
        assert good

    try:
        splits_hold()
        splits_ok = True
    except AssertionError:
        splits_ok = False
    detail = f"checkpoint={ckpt_ok} vvol={vvol_ok} splits(n=5..80)={splits_ok}"
    verdict(capsys, 9, "pipeline round-trips", ckpt_ok and vvol_ok and splits_ok, detail)


def test_criterion_10_tta_equivariance(capsys):
    patch = (8, 8, 8)
    model = build(NetworkConfig(stages=2, base_channels=3, patch_dims=patch, seed=10))
    image = np.random.default_rng(10).standard_normal((2, 13, 11, 9)).astype(np.float32)
    base = tta_predict(model, image, patch)
    equivariant = True
    for axes in ALL_FLIPS:
        flipped = np.ascontiguousarray(np.flip(image, tuple(a + 1 for a in axes)))
        equivariant &= np.array_equal(tta_predict(model, flipped, patch), np.flip(base, axes))
    singleton = np.array_equal(tta_predict(model, image, patch, ((),)), sliding_window(model, image, patch))
    verdict(capsys, 10, "TTA equivariance", equivariant and singleton, f"all 8 flips exact={equivariant}, singleton==sliding_window={singleton}")


def _cli(*args):
    proc = subprocess.run([sys.executable, "-m", "bxlstm_petct", *map(str, args)], capture_output=True, text=True)
    if proc.returncode != 0:
        raise AssertionError(f"{args[0]} exited {proc.returncode}: {proc.stderr.strip()}")
    return proc.stdout


@pytest.mark.slow
def test_criterion_11_end_to_end(capsys, tmp_path):
    t0 = time.perf_counter()
    corpus, work = tmp_path / "corpus", tmp_path / "work"
    stages = []

    _cli("phantom", "--n", 10, "--out", corpus, "--seed", 3)
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["cases"] == [f"case_{i:03d}" for i in range(10)] and len(list(corpus.glob("*.vvol"))) == 30
    stages.append("phantom")

    work.mkdir()
    _cli("split", "--manifest", corpus / "manifest.json", "--out", work / "splits.json")
    splits = json.loads((work / "splits.json").read_text())
    assert len(splits) == 5 and sorted(v for f in splits for v in f["val"]) == manifest["cases"]
    stages.append("split")

    _cli("pretrain", "--corpus", corpus, "--steps", 20, "--out", work / "mae.ckpt")
    assert read_checkpoint(work / "mae.ckpt")[0]["stage"] == "mae_pretrained"
    rows = read_log(work / "mae.ckpt.log.csv")
    assert len(rows) == 20 and list(rows[0]) == ["step", "loss", "pet_present"] and all(np.isfinite(float(r["loss"])) for r in rows)
    stages.append("pretrain")

    _cli("finetune", "--splits", work / "splits.json", "--fold", 0, "--corpus", corpus, "--init", work / "mae.ckpt", "--out", work / "seg.ckpt", "--steps", 20)
    assert read_checkpoint(work / "seg.ckpt")[0]["stage"] == "finetuned"
    rows = read_log(work / "seg.ckpt.log.csv")
    assert len(rows) == 20 and list(rows[0]) == ["step", "loss", "lr", "val_dice"] and rows[-1]["val_dice"] != ""
    stages.append("finetune")

    _cli("infer", "--ckpt", work / "seg.ckpt", "--case", "all", "--corpus", corpus, "--out", work / "pred")
    for name in manifest["cases"]:
        pred, gt = read_volume(work / "pred" / f"{name}_pred.vvol"), read_volume(corpus / f"{name}_mask.vvol")
        assert pred.kind == "MASK" and pred.dims == gt.dims and set(np.unique(pred.data)) <= {0.0, 1.0}
    stages.append("infer")

    _cli("evaluate", "--pred", work / "pred", "--gt", corpus, "--out", work / "eval")
    header = (work / "eval" / "scores.csv").read_text().splitlines()
    summary = json.loads((work / "eval" / "summary.json").read_text())
    assert header[0] == "case,dice,fnv_cm3,fpv_cm3" and len(header) == 11
    assert set(summary) == {"dice", "fnv_cm3", "fpv_cm3", "n_cases", "cases"} and summary["n_cases"] == 10
    assert [c["case"] for c in summary["cases"]] == manifest["cases"]
    assert 0 <= summary["dice"] <= 1 and summary["fnv_cm3"] >= 0 and summary["fpv_cm3"] >= 0
    stages.append("evaluate")

    _cli("export-slices", "--case", "case_000", "--pred", work / "pred", "--gt", corpus, "--out", work / "slices")
    pgms = sorted(p.name for p in (work / "slices").glob("*.pgm"))
    assert len(pgms) == 6 and all((work / "slices" / p).read_bytes().startswith(b"P5") for p in pgms)
    stages.append("export-slices")

    elapsed = time.perf_counter() - t0
    detail = f"{' -> '.join(stages)} in {elapsed / 60:.1f} min, test Dice {summary['dice']:.3f}"
    verdict(capsys, 11, "end-to-end CLI", elapsed < 3600, detail)
