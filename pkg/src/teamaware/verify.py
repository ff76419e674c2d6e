"""Property-verification suites: gradcheck, igm, kl, bound.

These are the machine-checkable claims the stack rests on:

  * gradcheck - analytic gradients of every layer, the awareness KL loss,
    each mixer, and the full composite objective on a pinned-noise
    2-agent/3-step batch match central finite differences (64-bit).
  * igm       - exhaustive joint-argmax equals the per-agent greedy tuple
    for all three mixers on random instances.
  * kl        - closed-form diagonal-Gaussian KL is non-negative, zero on
    equal pairs, and agrees with a Monte-Carlo estimator.
  * bound     - the variational mutual-information lower bound never exceeds
    the true MI on synthetic correlated Gaussians with known MI.

The CLI wraps these; the acceptance tests call them directly.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import awareness, diffcore as d, mixer as mixmod
from .agent import AgentSpec
from .config import TrainingConfig
from .replay import EpisodeRecord, stack_batch
from .trainer import build_params, compute_losses

GRAD_TOL = 1e-4
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""


@dataclass
class SuiteReport:
    suite: str
    checks: list[CheckResult] = field(default_factory=list)
    elapsed_s: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, value: float, threshold: float, passed: bool,
            detail: str = "") -> None:
        self.checks.append(CheckResult(name, value, threshold, passed, detail))

    def format(self) -> str:
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            extra = f" {c.detail}" if c.detail else ""
            lines.append(f"{status} {self.suite}.{c.name} "
                         f"value={c.value:.6g} threshold={c.threshold:.6g}{extra}")
        status = "PASS" if self.passed else "FAIL"
        lines.append(f"{status} suite={self.suite} checks={len(self.checks)} "
                     f"elapsed={self.elapsed_s:.2f}s")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _check_dense(rng) -> float:
    worst = 0.0
    for _ in range(10):
        n_in, n_out, rows = rng.integers(1, 7, size=3)
        x = rng.normal(size=(rows, n_in))
        ps = d.ParameterSet()
        d.init_dense(ps, rng, "lin", int(n_in), int(n_out))

        def f(p):
            out = d.dense_forward(x, p["lin.W"], p["lin.b"])
            return d.vsum(d.vtanh(out))

        worst = max(worst, d.finite_diff_check(f, ps, GRAD_TOL).max_rel_err)
    return worst


def _check_activations(rng) -> float:
    worst = 0.0
    for kind in ("relu", "leaky_relu", "elu", "logistic", "tanh", "softplus"):
        ps = d.ParameterSet()
        # keep inputs away from the relu/leaky/elu kink at 0
        x = rng.normal(size=16)
        x = np.where(np.abs(x) < 0.05, 0.2, x)
        ps.add("x", x)
        weights = rng.normal(size=16)

        def f(p, kind=kind):
            return d.vsum(d.mul(d.activation(kind, p["x"]), weights))

        worst = max(worst, d.finite_diff_check(f, ps, GRAD_TOL).max_rel_err)
    return worst


def _check_gru_chain(rng, steps: int = 5) -> float:
    hidden, n_in, rows = 6, 4, 3
    ps = d.ParameterSet()
    d.init_gru(ps, rng, "cell", n_in, hidden)
    d.init_dense(ps, rng, "emb", n_in, n_in)
    xs = [rng.normal(size=(rows, n_in)) for _ in range(steps)]
    h0 = rng.normal(size=(rows, hidden))

    def f(p):
        h = h0
        for x in xs:
            inp = d.vtanh(d.dense_forward(x, p["emb.W"], p["emb.b"]))
            h = d.gru_step(inp, h, d.gru_cell_params(p, "cell"))
        return d.vsum(d.mul(h, h))

    return d.finite_diff_check(f, ps, GRAD_TOL).max_rel_err


def _check_kl_loss(rng) -> float:
    rows, dim = 5, 3
    ps = d.ParameterSet()
    ps.add("mp", rng.normal(size=(rows, dim)))
    ps.add("sp_raw", rng.normal(size=(rows, dim)))
    ps.add("mq", rng.normal(size=(rows, dim)))
    ps.add("sq_raw", rng.normal(size=(rows, dim)))

    def f(p):
        sp = d.add(d.softplus(p["sp_raw"]), awareness.SIGMA_FLOOR)
        sq = d.add(d.softplus(p["sq_raw"]), awareness.SIGMA_FLOOR)
        return d.vsum(awareness.kl_diag_gaussian(p["mp"], sp, p["mq"], sq))

    return d.finite_diff_check(f, ps, GRAD_TOL).max_rel_err


def _check_mixer(kind: str, rng) -> float:
    n, n_act, state_dim, rows = 3, 4, 5, 4
    ps = d.ParameterSet()
    mixmod.init_mixer_params(ps, rng, kind, n, n_act, state_dim)
    q_rows = rng.normal(size=(rows, n, n_act))
    state = rng.normal(size=(rows, state_dim))
    actions = rng.integers(0, n_act, size=(rows, n))
    onehot = mixmod.actions_onehot(actions, n_act)
    weights = rng.normal(size=rows)
    # fold the utilities into the checked parameters so dQ_tot/dQ_i is
    # exercised alongside the mixer's own parameters
    ps.add("q_rows", q_rows)

    def f(p):
        rows_v = p["q_rows"]
        chosen = d.reshape(d.gather_last(rows_v, actions), (rows, n))
        q_tot = mixmod.mix(kind, mixmod.MixerInput(chosen, rows_v, state, onehot), p)
        return d.vsum(d.mul(q_tot, weights))

    return d.finite_diff_check(f, ps, GRAD_TOL).max_rel_err


def synthetic_batch(spec: AgentSpec, rng, lengths=(3, 2), limit: int = 3,
                    n_foods: int = 1) -> list[EpisodeRecord]:
    """Random well-formed episodes for loss-level tests (no env needed)."""
    state_dim = 3 * spec.n_agents + 4 * n_foods
    records = []
    for length in lengths:
        obs = np.zeros((limit + 1, spec.n_agents, spec.obs_dim))
        obs[:length + 1] = rng.normal(size=(length + 1, spec.n_agents, spec.obs_dim))
        state = np.zeros((limit + 1, state_dim))
        state[:length + 1] = rng.normal(size=(length + 1, state_dim))
        avail = np.ones((limit + 1, spec.n_agents, spec.n_actions))
        actions = np.zeros((limit, spec.n_agents), dtype=np.int64)
        actions[:length] = rng.integers(0, spec.n_actions, size=(length, spec.n_agents))
        reward = np.zeros(limit)
        reward[:length] = rng.normal(size=length)
        terminated = np.zeros(limit)
        terminated[length - 1] = 1.0
        mask = np.zeros(limit)
        mask[:length] = 1.0
        records.append(EpisodeRecord(obs, state, avail, actions, reward,
                                     terminated, mask, length))
    return records


def tiny_spec(use_awareness: bool = True, share_params: bool = True) -> AgentSpec:
    return AgentSpec(obs_dim=7, n_agents=2, n_actions=3, hidden_dim=10,
                     aware_dim=2, aware_hidden_dim=12,
                     use_awareness=use_awareness, share_params=share_params)


def full_loss_gradcheck(mix_kind: str, rng, kl_weight: float = 0.5,
                        share_params: bool = True,
                        corrupt: bool = False) -> d.GradCheckReport:
    """Central-difference audit of the entire objective (TD + weighted KL)
    on a pinned-noise 2-agent batch of 3- and 2-step episodes."""
    spec = tiny_spec(share_params=share_params)
    records = synthetic_batch(spec, rng)
    batch = stack_batch(records)
    params = build_params(rng, spec, mix_kind, batch["state"].shape[-1])
    target = build_params(rng, spec, mix_kind, batch["state"].shape[-1])
    cfg = TrainingConfig(kl_weight=kl_weight)
    frames = batch["state"].shape[1]
    noise = rng.standard_normal(
        (len(records), frames, spec.n_agents, spec.n_agents, spec.aware_dim))

    def f(p):
        total, _, _ = compute_losses(p, target.raw(), spec, mix_kind, batch,
                                     cfg, noise)
        if corrupt and isinstance(total, d.Var):
            # negative control: tamper with the root's backward rule
            total = d.Var(total.value, (total,), (lambda g: 3.0 * g,))
        return total

    return d.finite_diff_check(f, params, GRAD_TOL, FD_STEP,
                               max_coords_per_array=6,
                               rng=np.random.default_rng(12345))


def gradcheck_suite(seed: int = 7, inject_fault: bool = False) -> SuiteReport:
    start = time.time()
    report = SuiteReport("gradcheck")
    rng = np.random.default_rng(seed)
    dense = _check_dense(rng)
    report.add("dense", dense, GRAD_TOL, dense < GRAD_TOL)
    act = _check_activations(rng)
    report.add("activations", act, GRAD_TOL, act < GRAD_TOL)
    gru = _check_gru_chain(rng)
    report.add("gru_chain", gru, GRAD_TOL, gru < GRAD_TOL)
    kl = _check_kl_loss(rng)
    report.add("kl_loss", kl, GRAD_TOL, kl < GRAD_TOL)
    for kind in mixmod.MIXER_KINDS:
        err = _check_mixer(kind, rng)
        report.add(f"mixer_{kind}", err, GRAD_TOL, err < GRAD_TOL)
    for kind in mixmod.MIXER_KINDS:
        rep = full_loss_gradcheck(kind, np.random.default_rng(seed + 100),
                                  corrupt=inject_fault)
        report.add(f"full_loss_{kind}", rep.max_rel_err, GRAD_TOL, rep.passed)
    # negative control: a corrupted backward rule must be flagged
    bad = full_loss_gradcheck("vdn", np.random.default_rng(seed + 100), corrupt=True)
    report.add("corrupt_backward_flagged", bad.max_rel_err, GRAD_TOL,
               not bad.passed, detail="(expected to exceed threshold)")
    report.elapsed_s = time.time() - start
    return report


# ---------------------------------------------------------------------------
# igm
# ---------------------------------------------------------------------------

def igm_suite(trials: int = 1000, seed: int = 11) -> SuiteReport:
    start = time.time()
    report = SuiteReport("igm")
    for kind in mixmod.MIXER_KINDS:
        rep = mixmod.igm_check(kind, trials=trials,
                               rng=np.random.default_rng(seed))
        report.add(kind, rep.violations, 1, rep.passed,
                   detail=f"({rep.violations} violations / {rep.trials} trials)")
    report.elapsed_s = time.time() - start
    return report


# ---------------------------------------------------------------------------
# kl
# ---------------------------------------------------------------------------

def _random_gaussian_pairs(rng, count: int, dim: int):
    mp = rng.uniform(-2, 2, size=(count, dim))
    sp = rng.uniform(0.1, 2.0, size=(count, dim))
    mq = rng.uniform(-2, 2, size=(count, dim))
    sq = rng.uniform(0.1, 2.0, size=(count, dim))
    return mp, sp, mq, sq


def kl_suite(seed: int = 21, pairs_nonneg: int = 10_000, pairs_mc: int = 100,
             mc_samples: int = 100_000, dim: int = 3) -> SuiteReport:
    start = time.time()
    report = SuiteReport("kl")
    rng = np.random.default_rng(seed)

    mp, sp, mq, sq = _random_gaussian_pairs(rng, pairs_nonneg, dim)
    kl = np.asarray(awareness.kl_diag_gaussian(mp, sp, mq, sq))
    report.add("nonnegative", float(kl.min()), 0.0, bool(np.all(kl >= 0.0)),
               detail=f"(min over {pairs_nonneg} pairs)")

    kl_eq = np.asarray(awareness.kl_diag_gaussian(mp, sp, mp, sp))
    report.add("zero_on_equal", float(np.abs(kl_eq).max()), 1e-12,
               bool(np.all(np.abs(kl_eq) < 1e-12)))

    mp, sp, mq, sq = _random_gaussian_pairs(rng, pairs_mc, dim)
    closed = np.asarray(awareness.kl_diag_gaussian(mp, sp, mq, sq))
    worst_z = 0.0
    for k in range(pairs_mc):
        x = mp[k] + sp[k] * rng.standard_normal((mc_samples, dim))
        diff = awareness.gaussian_log_pdf(x, mp[k], sp[k]) \
            - awareness.gaussian_log_pdf(x, mq[k], sq[k])
        se = float(np.std(diff) / math.sqrt(mc_samples))
        z = abs(float(np.mean(diff)) - closed[k]) / max(se, 1e-300)
        worst_z = max(worst_z, z)
    report.add("matches_monte_carlo", worst_z, 3.0, worst_z <= 3.0,
               detail=f"(worst |z| over {pairs_mc} pairs x {mc_samples} samples)")
    report.elapsed_s = time.time() - start
    return report


# ---------------------------------------------------------------------------
# bound
# ---------------------------------------------------------------------------

def mi_bound_estimate(c: np.ndarray, t: np.ndarray, q_mean_fn, q_std: float,
                      marginal_entropy: float) -> tuple[float, float]:
    """Monte-Carlo estimate of the variational MI lower bound.

    With samples (c_k, t_k) from the true joint and any conditional Gaussian
    estimator q(c | t), the bound is E[log q(c | t)] + H(c); its estimate
    can exceed the true mutual information only by Monte-Carlo error.
    Returns (estimate, standard error).
    """
    logq = awareness.gaussian_log_pdf(c[:, None], q_mean_fn(t)[:, None],
                                      np.asarray([[q_std]]))
    est = float(np.mean(logq)) + marginal_entropy
    se = float(np.std(logq) / math.sqrt(len(logq)))
    return est, se


def bound_suite(seed: int = 17, settings: int = 20,
                n_samples: int = 100_000) -> SuiteReport:
    """Synthetic correlated-Gaussian audit of the MI lower bound.

    (c, t) are jointly Gaussian with correlation rho, so the true mutual
    information is -0.5*log(1 - rho^2).  The estimator q is the true
    conditional with randomly perturbed regression slope, offset, and
    scale; for any such q the bound must sit at or below the true MI.
    """
    start = time.time()
    report = SuiteReport("bound")
    rng = np.random.default_rng(seed)
    worst_excess = -np.inf
    worst_detail = ""
    for k in range(settings):
        rho = float(rng.uniform(-0.95, 0.95))
        true_mi = -0.5 * math.log(1.0 - rho * rho)
        t = rng.standard_normal(n_samples)
        c = rho * t + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n_samples)
        if k < settings // 4:
            slope, offset, scale = rho, 0.0, math.sqrt(1.0 - rho * rho)
        else:
            slope = rho * float(rng.uniform(0.7, 1.3))
            offset = float(rng.uniform(-0.1, 0.1))
            scale = math.sqrt(1.0 - rho * rho) * float(rng.uniform(0.8, 1.4))
        marginal_entropy = 0.5 * math.log(2.0 * math.pi * math.e)  # Var(c) = 1
        est, se = mi_bound_estimate(c, t, lambda tt: slope * tt + offset,
                                    scale, marginal_entropy)
        excess = (est - true_mi) / max(se, 1e-300)
        if excess > worst_excess:
            worst_excess = excess
            worst_detail = f"(rho={rho:.3f} est={est:.4f} true={true_mi:.4f} se={se:.2g})"
    report.add("never_exceeds_true_mi", worst_excess, 3.0,
               worst_excess <= 3.0, detail=worst_detail)
    report.elapsed_s = time.time() - start
    return report


SUITES = {
    "gradcheck": gradcheck_suite,
    "igm": igm_suite,
    "kl": kl_suite,
    "bound": bound_suite,
}


def run_suite(name: str, **kwargs) -> SuiteReport:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name](**kwargs)
