"""Acceptance suite: one PASS/FAIL line per criterion.

Criteria 1-5 and 9 are fast property suites. Criteria 6-8 share one desk-scale
experiment (pretrain on the source domain, then adapt to the target domain with
every ablation row plus the frozen and full baselines over three seeds); it runs
once per session in a module fixture and takes roughly 20 minutes on one CPU core.
"""
import itertools
import json
import time

import numpy as np
import pytest
import torch

from svdtune.baselines import LoRALinear, closed_form_counts, count_trainable, make_baseline
from svdtune.checkpoint import frozen_audit, load_model
from svdtune.data import TARGET, apply_shift, render_image
from svdtune.metrics import dice, evaluate, paired_significance
from svdtune.model import ModelConfig, build_pretrained, merge_adapters, pool_pos_embed
from svdtune.report import ablation_table
from svdtune.svd_adapter import decompose
from svdtune.text import TextAffineLayer, apply_tal
from svdtune.train import RunConfig, default_pretrain_config, eval_data, load_eval, pretrain, run_ablation

from helpers import central_difference, random_matrix, rel_err

SEEDS = (0, 1, 2)
BUDGET_S = 30 * 60


@pytest.fixture
def verdict(capsys):
    """Print one acceptance line, then fail the test if the criterion failed."""

    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {'PASS' if ok else 'FAIL'} [{name}] {detail}")
        assert ok, f"{name}: {detail}"

    return emit


# --------------------------------------------------------------------------- 1-5, 9: property suites


def test_1_identity_reconstruction(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, kinds = 0.0, set()
    for i in range(50):
        d = int(rng.integers(2, 96))
        k = [int(rng.integers(d + 1, 128)), d, int(rng.integers(1, d))][i % 3]
        kinds.add((d > k) - (d < k))
        w, b = random_matrix(rng, d, k), torch.from_numpy(rng.standard_normal(d))
        x = torch.from_numpy(rng.standard_normal((4, k)))
        worst = max(worst, rel_err(decompose(w, b)(x), x @ w.T + b))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-5 and dt < 10 and kinds == {-1, 0, 1}
    verdict("1 identity reconstruction", ok, f"max rel err {worst:.2e} (<= 1e-5) over 50 matrices, {dt:.2f}s (< 10s)")


def _loss_on(module, x, c):
    return lambda: (torch.tanh(module(x)) * c).sum()


def test_2_gradients(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    errs = {}
    for d, k in [(8, 8), (8, 12)]:
        x = torch.from_numpy(rng.standard_normal((5, k)))
        c = torch.from_numpy(rng.standard_normal((5, d)))
        s = decompose(random_matrix(rng, d, k), torch.from_numpy(rng.standard_normal(d)))
        while True:  # stay away from the ReLU kink
            scale = torch.from_numpy(rng.uniform(0.2, 1.5, s.rank))
            shift = torch.from_numpy(rng.uniform(-0.3, 0.3, s.rank)) * s.sigma.mean()
            if (scale * s.sigma + shift).min() > 1e-3:
                break
        with torch.no_grad():
            s.scale.copy_(scale)
            s.shift.copy_(shift)
        lora = LoRALinear(random_matrix(rng, d, k), torch.from_numpy(rng.standard_normal(d)), 2)
        with torch.no_grad():
            lora.X.copy_(torch.from_numpy(rng.standard_normal((d, 2))))
        for tag, module, params in [("svd", s, ("scale", "shift")), ("lora", lora, ("X", "Y"))]:
            loss = _loss_on(module, x, c)
            module.zero_grad()
            loss().backward()
            for p in params:
                param = getattr(module, p)
                errs[f"{tag}.{p} {d}x{k}"] = rel_err(param.grad, central_difference(loss, param))
    tal = TextAffineLayer(8).double()
    with torch.no_grad():
        tal.weight.add_(0.3 * torch.from_numpy(rng.standard_normal((8, 8))))
        tal.bias.copy_(torch.from_numpy(rng.standard_normal(8)))
    e = torch.from_numpy(rng.standard_normal(8))
    loss = lambda: apply_tal(tal, e).pow(2).sum()  # noqa: E731
    loss().backward()
    for p in ("weight", "bias"):
        errs[f"tal.{p}"] = rel_err(getattr(tal, p).grad, central_difference(loss, getattr(tal, p)))
    dt = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] <= 1e-3 and dt < 60
    verdict("2 gradients", ok, f"max rel err {errs[worst]:.2e} at {worst} (<= 1e-3), {len(errs)} checks, "
                               f"{dt:.2f}s (< 60s)")


ACCOUNTING_CONFIGS = [
    ModelConfig(image_size=64, patch_size=16, embed_dim=32, depth=2, num_heads=4, mlp_hidden=64, prompt_dim=16,
                decoder_mlp_dim=64),
    ModelConfig(image_size=32, patch_size=8, embed_dim=16, depth=1, num_heads=2, mlp_hidden=40, prompt_dim=8,
                decoder_mlp_dim=32, decoder_heads=2),
    ModelConfig(image_size=48, patch_size=16, embed_dim=24, depth=3, num_heads=3, mlp_hidden=24, prompt_dim=12,
                decoder_mlp_dim=16, decoder_heads=3, attn_downsample=1),
    ModelConfig(image_size=64, patch_size=8, embed_dim=40, depth=2, num_heads=5, mlp_hidden=16, prompt_dim=24,
                decoder_mlp_dim=48, decoder_heads=5, decoder_depth=1, in_chans=1),
    ModelConfig(),
]


def test_3_parameter_accounting(verdict):
    t0 = time.perf_counter()
    mismatches = []
    for cfg in ACCOUNTING_CONFIGS:
        base = build_pretrained(cfg, seed=0)
        for method in ("frozen", "bias_only", "lora4", "svd", "full"):
            enumerated = sum(p.numel() for p in make_baseline(base, method).parameters() if p.requires_grad)
            closed = closed_form_counts(method, cfg)[1]
            if closed != enumerated:
                mismatches.append((cfg.embed_dim, method, closed, enumerated))
    svd, lora = count_trainable("svd"), count_trainable("lora4")
    dt = time.perf_counter() - t0
    ok = not mismatches and svd.fraction < 0.01 and svd.trainable < lora.trainable and dt < 10
    verdict("3 parameter accounting", ok,
            f"closed form == enumeration on 5 configs ({len(mismatches)} mismatches); default svd fraction "
            f"{100 * svd.fraction:.3f}% (< 1%); svd {svd.trainable} < lora4 {lora.trainable}; {dt:.2f}s (< 10s)")


def test_4_dice(verdict):
    t0 = time.perf_counter()
    g = np.zeros((1, 3), bool)
    g[0, :2] = True
    p = np.zeros((1, 3), bool)
    p[0, 0] = True
    nonblank = np.eye(4, dtype=bool)
    examples = [dice(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0, dice(nonblank, nonblank) == 1.0,
                dice(np.zeros((4, 4)), nonblank) == 0.0, dice(p, g) == 2 / 3]
    rng = np.random.default_rng(11)
    failures = 0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 12, size=2))
        a = rng.random(shape) < rng.uniform(0, 0.6)
        b = rng.random(shape) < rng.uniform(0, 0.6)
        d = dice(a, b)
        outer = a & (rng.random(shape) < 0.7)
        inner = outer & (rng.random(shape) < 0.5)
        checks = [d == dice(b, a), (d == 1.0) == np.array_equal(a, b), dice(a, a) == 1.0, 0 <= d <= 1,
                  dice(outer, a) >= dice(inner, a)]
        failures += not all(checks)
    dt = time.perf_counter() - t0
    ok = all(examples) and failures == 0 and dt < 10
    verdict("4 dice", ok, f"{sum(examples)}/4 examples exact; {failures} property failures over 1000 pairs; "
                          f"{dt:.2f}s (< 10s)")


def test_5_pos_embed_pooling(verdict):
    t0 = time.perf_counter()
    out = pool_pos_embed(torch.arange(1.0, 17.0).reshape(4, 4, 1), 2)[..., 0]
    worked = torch.equal(out, torch.tensor([[3.5, 5.5], [11.5, 13.5]]))
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        c = float(rng.uniform(-10, 10))
        pooled = pool_pos_embed(torch.full((8, 8, 6), c, dtype=torch.float64), 4)
        worst = max(worst, float((pooled - c).abs().max()))
    dt = time.perf_counter() - t0
    ok = worked and worst <= 1e-12 and dt < 1
    verdict("5 pooling", ok, f"worked example exact: {worked}; constant fields max dev {worst:.1e}; {dt:.3f}s (< 1s)")


def _enumerated_p(a, b):
    """Two-sided exact signed-rank p by enumerating every sign pattern."""
    from scipy.stats import rankdata

    diff = np.asarray(a, float) - np.asarray(b, float)
    diff = diff[diff != 0]
    if len(diff) == 0:
        return 1.0
    ranks = rankdata(np.abs(diff))
    observed = ranks[diff > 0].sum()
    stats = np.array([ranks[np.array(s, bool)].sum() for s in itertools.product([0, 1], repeat=len(diff))])
    return min(1.0, 2 * min(np.mean(stats <= observed + 1e-9), np.mean(stats >= observed - 1e-9)))


def test_9_significance(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(30):
        n = int(rng.integers(5, 13))
        a, b = np.round(rng.random(n), 1), np.round(rng.random(n), 1)
        if np.all(a == b):
            continue
        worst = max(worst, abs(paired_significance(a, b) - _enumerated_p(a, b)))
    same = rng.random(10)
    identical = paired_significance(same, same)
    ok = worst <= 1e-12 and identical == 1.0
    verdict("9 significance", ok, f"max |p - enumeration| {worst:.1e} (<= 1e-12) for n <= 12; "
                                  f"identical vectors p = {identical}")


# --------------------------------------------------------------------------- 6-8: desk-scale experiment


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    ckpt = pretrain(default_pretrain_config(out_dir=str(root / "pretrain"), log_every=0))
    t_pre = time.perf_counter() - t0
    table = run_ablation(RunConfig(out_dir=str(root / "ablation"), log_every=0), ckpt, seeds=SEEDS,
                         extra_methods=("frozen", "full"))
    return {"root": root, "pretrained": ckpt, "source": load_eval(ckpt.parent), "table": table,
            "rows": {r["name"]: r for r in table["rows"]}, "t_pretrain": t_pre, "t_total": time.perf_counter() - t0}


def _mean(experiment, name):
    return experiment["rows"][name]["mean"]


@pytest.mark.slow
def test_6_gate(verdict, experiment, capsys):
    with capsys.disabled():
        print("\n" + ablation_table(experiment["table"]))
    src = experiment["source"].average
    verdict("6 pretrain gate", src >= 0.85, f"source avg DSC {src:.3f} (>= 0.85), pretraining took "
                                            f"{experiment['t_pretrain']:.0f}s")


@pytest.mark.slow
def test_6a_beats_frozen(verdict, experiment):
    a, f = _mean(experiment, "all"), _mean(experiment, "frozen")
    verdict("6a svd-all vs frozen", a >= f + 0.15, f"svd-all {a:.3f} >= frozen {f:.3f} + 0.15")


@pytest.mark.slow
def test_6b_beats_layernorm_row(verdict, experiment):
    a, ln = _mean(experiment, "all"), _mean(experiment, "layernorm")
    verdict("6b svd-all vs layernorm row", a >= ln, f"svd-all {a:.3f} >= pos+layernorm {ln:.3f}")


@pytest.mark.slow
def test_6c_shift_vs_scale(verdict, experiment):
    sh, sc = _mean(experiment, "shift"), _mean(experiment, "scale")
    verdict("6c shift-only vs scale-only", sh >= sc - 0.05, f"shift-only {sh:.3f} >= scale-only {sc:.3f} - 0.05")


@pytest.mark.slow
def test_6d_close_to_full(verdict, experiment):
    a, full = _mean(experiment, "all"), _mean(experiment, "full")
    verdict("6d svd-all vs full", abs(a - full) <= 0.05, f"|svd-all {a:.3f} - full {full:.3f}| = "
                                                         f"{abs(a - full):.3f} (<= 0.05)")


@pytest.mark.slow
def test_6_runtime(verdict, experiment):
    t = experiment["t_total"]
    verdict("6 runtime", t <= BUDGET_S, f"pretrain + {len(experiment['rows'])} rows x {len(SEEDS)} seeds took "
                                        f"{t / 60:.1f} min (<= 30 min)")


def _run_dirs(experiment):
    return sorted((experiment["root"] / "ablation").glob("*/seed*"))


@pytest.mark.slow
def test_7_blank_prompts(verdict, experiment):
    fg, per_class = [], {}
    for seed in SEEDS:
        run = experiment["root"] / "ablation" / "all" / f"seed{seed}"
        result = load_eval(run)
        cfg = RunConfig.from_dict(json.loads((run / "config.json").read_text()))
        blank = {(s.sample_id, s.prompt) for s in eval_data(cfg) if s.blank}
        fg.append(result.extras["blank_foreground_fraction"])
        for sid, c, d in result.per_sample:
            if (sid, c) in blank:
                per_class.setdefault(c, []).append(d)
    fg_mean = float(np.mean(fg))
    dsc = {c: float(np.mean(v)) for c, v in per_class.items()}
    ok = fg_mean <= 0.02 and min(dsc.values()) >= 0.9
    verdict("7 blank prompts", ok, f"blank-query foreground {100 * fg_mean:.2f}% (<= 2%); blank-gt DSC per class "
            + ", ".join(f"{c} {v:.3f}" for c, v in dsc.items()) + " (>= 0.9)")


@pytest.mark.slow
def test_8_frozen_audit(verdict, experiment):
    runs = _run_dirs(experiment)
    violations = {str(r.relative_to(experiment["root"])): frozen_audit(experiment["pretrained"], r / "checkpoint.pt")
                  for r in runs}
    recorded = [json.loads((r / "audit.json").read_text())["violations"] for r in runs]
    bad = {k: v for k, v in violations.items() if v}
    ok = len(runs) == len(experiment["rows"]) * len(SEEDS) and not bad and not any(recorded)
    verdict("8 frozen audit", ok, f"{len(runs)} adapted runs, {len(bad)} with changed frozen arrays")


# --------------------------------------------------------------------------- worked examples on the trained model


def _circle_square_images(n, size):
    images, circles, squares = [], [], []
    for seed in range(n):
        rng = np.random.default_rng(10_000 + seed)
        gray, masks = render_image(rng, size, ["circle", "square"], deform=TARGET.deform, count_weights=(0.0, 1.0))
        gray = apply_shift(gray, TARGET, rng)
        images.append(torch.from_numpy(np.repeat(gray[None], 3, axis=0)))
        circles.append(masks["circle"])
        squares.append(masks["square"])
    return torch.stack(images).float(), circles, squares


@pytest.mark.slow
def test_circle_prompt_example(verdict, experiment):
    model = load_model(experiment["root"] / "ablation" / "all" / "seed0" / "checkpoint.pt")
    images, circles, squares = _circle_square_images(10, model.config.image_size)
    with torch.no_grad():
        pred = (model(images, ["circle"] * len(images)) > 0).numpy()
    dsc = [dice(p, c) for p, c in zip(pred, circles)]
    leak = [p[s].mean() for p, s in zip(pred, squares)]
    ok = np.mean(dsc) >= 0.8 and np.mean(leak) <= 0.05
    verdict("example circle+square", ok, f"circle DSC mean {np.mean(dsc):.3f} (min {min(dsc):.3f}, >= 0.8); "
                                         f"square foreground {100 * np.mean(leak):.2f}% (<= 5%) over 10 images")


@pytest.mark.slow
def test_merged_model_example(verdict, experiment):
    run = experiment["root"] / "ablation" / "all" / "seed0"
    model = load_model(run / "checkpoint.pt")
    merged = merge_adapters(model)
    cfg = RunConfig.from_dict(json.loads((run / "config.json").read_text())).replace(n_eval=20)
    data = eval_data(cfg)
    a, b = evaluate(model, data), evaluate(merged, data)
    ok = a.per_sample == b.per_sample and a.average == b.average
    verdict("example merged model", ok, f"adapter DSC {a.average:.6f} vs merged DSC {b.average:.6f} on a "
                                        f"fixed {len(data)}-query batch")
