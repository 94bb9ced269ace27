"""Acceptance criteria 1-11.

Each test records one line ``criterion N: PASS|FAIL  <details>``; the lines
are printed together at the end of the session (see conftest.py).  The
heavy criteria drive the experiment harness with the shipped configs.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import trapezoid

from robustlab import harness, packets, spectral
from robustlab.config import load_config
from robustlab.models import Model, ModelSpec, load_checkpoint, loss, params_hash, train
from robustlab.tensor import grad_check, rng_stream

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run_stage(kind: str, out: Path, *overrides: str) -> tuple[harness.MetricsReport, float]:
    cfg = load_config(CONFIGS / f"{kind}.json", list(overrides), out=str(out))
    t0 = time.perf_counter()
    report = harness.run_experiment(cfg)
    return report, time.perf_counter() - t0


@pytest.fixture(scope="module")
def attack_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("attack1")
    report, seconds = run_stage("attack", out)
    return report, seconds, out


@pytest.fixture(scope="module")
def ifa_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("ifa1")
    report, seconds = run_stage("ifa", out)
    return report, seconds, out


# 1 ---------------------------------------------------------------------------

def _small_models():
    stream = rng_stream(2024, 0)
    for k in range(20):
        if k % 2 == 0:
            hidden = 3 + stream.below(5)
            spec = ModelSpec("mlp", [3, hidden, 4], activation="tanh", classes=4)
            shape = (2, 3)
        else:
            spec = ModelSpec("convnet", [1, 2, 3], input_shape=(1, 8, 8), activation="tanh",
                             classes=3, hidden=5)
            shape = (2, 1, 8, 8)
        yield k, Model.create(spec, 100 + k), shape


def test_criterion_1_gradient_correctness(record):
    t0 = time.perf_counter()
    worst, failures = 0.0, []
    for k, m, shape in _small_models():
        rng = np.random.default_rng(k)
        x = rng.uniform(0.1, 0.9, size=shape)
        y = rng.integers(0, m.spec.classes, size=shape[0])
        reports = [("input", grad_check(lambda t: loss(m, t, y), x))]
        for name in sorted(m.params):
            def f(t, name=name):
                return loss(m, x, y, dict(m.params, **{name: t}))
            reports.append((name, grad_check(f, m.params[name])))
        for name, rep in reports:
            worst = max(worst, rep.max_rel_error)
            if rep.max_rel_error > 1e-5:
                failures.append(f"model {k} {name}: {rep.message}")
    seconds = time.perf_counter() - t0
    ok = not failures and seconds < 30
    record(1, ok, f"20 models, max rel error {worst:.2e} (<= 1e-5), {seconds:.1f} s (< 30 s)")
    assert ok, failures[:3]


# 2 ---------------------------------------------------------------------------

def _gaussian(nodes: int) -> packets.PacketGrid:
    # psi^2 is the unit-variance normal density
    return packets.packet_from_function(lambda p: np.exp(-p[:, 0] ** 2 / 4), [(-8.0, 8.0)], nodes)


def test_criterion_2_uncertainty_equality(record):
    t0 = time.perf_counter()
    dev = abs(packets.uncertainty_product(_gaussian(2048), 0).product - 0.5)
    # same interval, half the spacing
    dev_fine = abs(packets.uncertainty_product(_gaussian(4095), 0).product - 0.5)
    factor = dev / dev_fine
    seconds = time.perf_counter() - t0
    ok = dev <= 1e-3 and 3.0 <= factor <= 5.0 and seconds < 5
    record(2, ok, f"|product - 0.5| = {dev:.2e} (<= 1e-3), halving h: factor {factor:.3f} "
                  f"(in [3, 5]), {seconds:.2f} s")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_criterion_3_learned_packets(tmp_path, record):
    try:
        report, seconds = run_stage("uncertainty", tmp_path)
        error = ""
    except harness.InvariantViolation as exc:
        report, seconds, error = harness.load_report(tmp_path / "report.json"), math.inf, str(exc)
    stage = report.stages.get("uncertainty", {})
    t = report.tables["uncertainty"]
    rows = [dict(zip(t["columns"], r)) for r in t["rows"]]
    c = report.tables["commutator"]
    comm = [dict(zip(c["columns"], r)) for r in c["rows"]]
    epochs = sorted({r["epoch"] for r in rows})
    products_ok = len(rows) == len(epochs) * 2 * 2 and all(r["product"] >= 0.5 - r["tol"] for r in rows)
    comm_ok = bool(comm) and all(r["max_residual"] <= r["bound"] for r in comm)
    ok = not error and len(epochs) == 3 and products_ok and comm_ok and seconds < 120
    record(3, ok, f"{len(epochs)} checkpoints x 2 classes x 2 axes, min product "
                  f"{min(r['product'] for r in rows):.4f} (>= 0.5 - tol), commutator "
                  f"{'within' if comm_ok else 'outside'} O(h^2) bound, {seconds:.1f} s (< 120 s)"
                  f"{'; ' + error if error else ''}; trade-off epochs "
                  f"{[(d['from_epoch'], d['to_epoch']) for d in stage.get('tradeoff_trend', []) if d['observed']]}")
    assert ok


# 4, 5 ------------------------------------------------------------------------

def test_criterion_4_attack_efficacy(attack_run, record):
    report, seconds, _ = attack_run
    a = report.stages["attack"]
    ok = a["TA"] >= 0.90 and a["RA"] <= a["TA"] - 0.20 and seconds < 300
    record(4, ok, f"TA {a['TA']:.3f} (>= 0.90), RA {a['RA']:.3f} (<= TA - 0.20), "
                  f"{seconds:.1f} s (< 300 s)")
    assert ok


def test_criterion_5_linf_budget(attack_run, record):
    report, _, _ = attack_run
    a = report.stages["attack"]
    ok = a["max_linf"] <= a["epsilon"] and a["budget_violations"] == 0 and a["zero_budget_exact"]
    record(5, ok, f"{a['attacked_samples']} samples, max |X_adv - X0|_inf {a['max_linf']!r} "
                  f"(<= {a['epsilon']}), {a['budget_violations']} violations, "
                  f"eps = 0 bit-exact: {a['zero_budget_exact']}")
    assert ok


# 6 ---------------------------------------------------------------------------

def test_criterion_6_opposite_fgsm_trend(attack_run, tmp_path, record):
    _, _, out = attack_run
    ckpt = out / "checkpoints" / "classifier_e5"
    report, seconds = run_stage("augment", tmp_path, f"checkpoint={ckpt}")
    tr = report.stages["augment"]["train"]
    ok = tr["TA_end"] >= tr["TA_start"] and tr["RA_end"] >= tr["RA_start"] and tr["telescoping_exact"]
    te = report.stages["augment"]["test"]
    record(6, ok, f"train split N=0 -> 50: TA {tr['TA_start']:.3f} -> {tr['TA_end']:.3f}, "
                  f"RA {tr['RA_start']:.3f} -> {tr['RA_end']:.3f}; telescoping bit-exact: "
                  f"{tr['telescoping_exact']} (test split: TA {te['TA_start']:.3f} -> {te['TA_end']:.3f}, "
                  f"RA {te['RA_start']:.3f} -> {te['RA_end']:.3f}), {seconds:.0f} s")
    assert ok


# 7 ---------------------------------------------------------------------------

def _independent_beta(model, label, domain, nodes):
    """Trapezoid rule on the loss grid, with log-softmax written out here."""
    axes = [np.linspace(a, b, nodes) for a, b in domain]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(domain))
    z = model.predict(mesh)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    values = (lse - z[:, label]).reshape([nodes] * len(domain)) ** 2
    for ax in reversed(axes):
        values = trapezoid(values, ax, axis=-1)
    return float(values)


def test_criterion_7_attack_operator_bridge(record):
    cfg = load_config(CONFIGS / "uncertainty.json")
    train_set, _ = harness.load_data(cfg)
    m = Model.create(harness.model_spec(cfg), cfg.seed)
    train(m, train_set, harness.train_config(cfg.train, cfg.seed))
    domain = [tuple(b) for b in train_set.bounds]
    beta = packets.build_packet(m, 0, domain, 128, warn=False).beta
    beta_ind = _independent_beta(m, 0, domain, 128)
    pts = np.random.default_rng(7).uniform([d[0] for d in domain], [d[1] for d in domain], size=(100, 2))
    res = packets.packet_gradient_alignment(m, pts, 0, beta)
    cos_err = max(abs(r.cosine - 1) for r in res)
    ratio_err = max(abs(r.eps_ratio - math.sqrt(beta_ind)) / math.sqrt(beta_ind) for r in res)
    ok = all(r.defined for r in res) and cos_err <= 1e-12 and ratio_err <= 1e-9
    record(7, ok, f"100 points, max |cos - 1| {cos_err:.1e} (<= 1e-12), max rel |eps'/eps - sqrt(beta)| "
                  f"{ratio_err:.1e} (<= 1e-9)")
    assert ok


# 8 ---------------------------------------------------------------------------

def test_criterion_8_spectral_correctness(record):
    rng = np.random.default_rng(8)
    parseval = 0.0
    for _ in range(50):
        x = rng.random((28, 28))
        mag = spectral.dft2_centered(x)
        parseval = max(parseval, abs((mag ** 2).sum() / x.size - (x ** 2).sum()) / (x ** 2).sum())
    impulse = np.zeros((28, 28))
    impulse[3, 17] = 1.0
    cfg = spectral.SpectralConfig((12, 18), (12, 18))
    imp_err = abs(spectral.hf_ratio(impulse, cfg) - (1 - 36 / 784))
    const = spectral.hf_ratio(np.full((28, 28), 0.7), cfg)
    ok = parseval <= 1e-9 and imp_err <= 1e-12 and abs(const) <= 1e-12
    record(8, ok, f"Parseval rel error {parseval:.1e} (<= 1e-9) over 50 images, impulse error "
                  f"{imp_err:.1e} (<= 1e-12), constant-image ratio {const:.1e}")
    assert ok


# 9 ---------------------------------------------------------------------------

def test_criterion_9_frequency_trend(tmp_path, record):
    report, seconds = run_stage("spectra", tmp_path)
    s = report.stages["spectra"]
    t = report.tables["spectra"]
    pts = [dict(zip(t["columns"], r)) for r in t["rows"]]
    rho = s["spearman"]
    ok = len(pts) >= 4 and rho is not None and rho > 0 and seconds < 180
    trend = ", ".join(f"e{p['epoch']}: TA {p['TA']:.3f} ratio {p['mean_ratio']:.4f}" for p in pts)
    record(9, ok, f"Spearman(TA, mean hf_ratio) = {rho} (> 0) over {len(pts)} checkpoints, "
                  f"{seconds:.0f} s (< 180 s); {trend}")
    assert ok


# 10, 11 ----------------------------------------------------------------------

def test_criterion_10_ifa_end_to_end(ifa_run, record):
    report, seconds, _ = ifa_run
    cks = report.stages["ifa"]["checkpoints"]
    needed = ("CL_TA", "CL_RA", "ACL_TA", "ACL_RA", "generator_loss")
    complete = bool(cks) and all(all(c.get(k) is not None for k in needed) and c["generator_loss"]
                                 for c in cks)
    unchanged = all(c["classifier_unchanged"] for c in cks)
    ok = complete and unchanged and seconds < 900
    rows = "; ".join(f"e{c['epoch']}: CL {c['CL_TA']:.3f}/{c['CL_RA']:.3f} ACL {c['ACL_TA']:.3f}/"
                     f"{c['ACL_RA']:.3f}" for c in cks)
    record(10, ok, f"{seconds:.0f} s (< 900 s), report complete: {complete}, classifier bit-identical "
                   f"across generator training: {unchanged}; TA/RA {rows}")
    assert ok


def _comparable(report: harness.MetricsReport) -> dict:
    d = report.comparable()
    d["config"].pop("out")
    return d


def test_criterion_11_determinism(attack_run, ifa_run, tmp_path, record):
    a2, _ = run_stage("attack", tmp_path / "attack2")
    i2, _ = run_stage("ifa", tmp_path / "ifa2")
    same_attack = _comparable(attack_run[0]) == _comparable(a2)
    same_ifa = _comparable(ifa_run[0]) == _comparable(i2)
    ck1 = load_checkpoint(attack_run[2] / "checkpoints" / "classifier_e5")[0]
    ck2 = load_checkpoint(tmp_path / "attack2" / "checkpoints" / "classifier_e5")[0]
    same_ckpt = params_hash(ck1.params) == params_hash(ck2.params)
    ok = same_attack and same_ifa and same_ckpt
    record(11, ok, f"attack reports identical: {same_attack}, ifa reports identical: {same_ifa}, "
                   f"checkpoints identical: {same_ckpt}")
    assert ok
