"""Tabular check of the teacher/student suboptimality bound.

For an MDP whose actions are points of [0, 1], a phase-1 value estimate within
``eps`` of optimal and a student whose actions stay within ``eta`` of the
greedy teacher, the student's loss against the optimum is at most
``(2 eps gamma + eta c) / (1 - gamma)`` with
``c = L_R + gamma L_P sum_s V*(s)``.  Everything here is computed exactly by
dynamic programming so the inequality can be tested instance by instance.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

STOCHASTIC_TOL = 1e-12
BOUND_TOL = 1e-9


@dataclass
class TabularMdp:
    P: np.ndarray        # (S, A, S)
    R: np.ndarray        # (S, A)
    gamma: float
    actions: np.ndarray  # (A,) grid in [0, 1]

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        S, A = self.R.shape
        if self.P.shape != (S, A, S):
            raise ValueError(f"transition tensor must be {(S, A, S)}, got {self.P.shape}")
        if self.actions.shape != (A,):
            raise ValueError("one action coordinate per action index is required")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("discount must lie in (0, 1)")

    @property
    def n_states(self):
        return self.R.shape[0]

    @property
    def n_actions(self):
        return self.R.shape[1]

    def check_stochastic(self):
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=-1) - 1.0)) > STOCHASTIC_TOL:
            raise ValueError("every P[s, a, :] must be a probability vector")


def generate_mdp(seed, n_states=None, n_actions=None, gamma=None, smoothness=2.0):
    """Random MDP whose reward and transitions vary smoothly with the action.

    Rewards are ``R(s, a) = c_s + b_s sin(w_s a + p_s)`` squashed into [0, 1];
    transitions are a softmax over next states of logits affine in ``a``.
    Both families have modest Lipschitz constants, which keeps the bound
    informative.
    """
    rng = np.random.default_rng(seed)
    S = int(n_states) if n_states is not None else int(rng.integers(2, 21))
    A = int(n_actions) if n_actions is not None else int(rng.integers(2, 12))
    g = float(gamma) if gamma is not None else float(rng.choice([0.9, 0.99]))
    a = np.linspace(0.0, 1.0, A)
    c = rng.uniform(0.2, 0.8, size=(S, 1))
    b = rng.uniform(0.0, 0.2, size=(S, 1))
    w = rng.uniform(0.0, smoothness * np.pi, size=(S, 1))
    p = rng.uniform(0.0, 2 * np.pi, size=(S, 1))
    R = c + b * np.sin(w * a[None, :] + p)
    base = rng.normal(0.0, 1.0, size=(S, 1, S))
    slope = rng.normal(0.0, smoothness, size=(S, 1, S))
    logits = base + slope * a[None, :, None]
    logits -= logits.max(axis=-1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=-1, keepdims=True)
    return TabularMdp(P, R, g, a)


def bellman_q(mdp, V):
    return mdp.R + mdp.gamma * mdp.P @ V


def value_iteration(mdp, tol=1e-10, max_iter=1_000_000):
    """Optimal values with sup-norm fixed-point residual below ``tol``."""
    mdp.check_stochastic()
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        V_new = bellman_q(mdp, V).max(axis=1)
        if np.max(np.abs(V_new - V)) < tol * (1.0 - mdp.gamma):
            V = V_new
            break
        V = V_new
    # polish: evaluate the greedy policy exactly, then confirm it is a fixed point
    pi = greedy_policy(mdp, V)
    V_pi = policy_evaluation(mdp, pi)
    if np.max(np.abs(bellman_q(mdp, V_pi).max(axis=1) - V_pi)) < tol:
        return V_pi
    return V


def greedy_policy(mdp, V):
    """Deterministic greedy action indices; ties go to the smallest index."""
    return np.argmax(bellman_q(mdp, np.asarray(V, dtype=float)), axis=1)


def policy_evaluation(mdp, pi, tol=1e-10):
    """Exact values of the deterministic policy ``pi`` (action index per state)."""
    mdp.check_stochastic()
    pi = np.asarray(pi, dtype=int)
    s = np.arange(mdp.n_states)
    P_pi = mdp.P[s, pi]
    R_pi = mdp.R[s, pi]
    V = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, R_pi)
    # a few fixed-point sweeps remove any residual from the direct solve
    for _ in range(100):
        V_new = R_pi + mdp.gamma * P_pi @ V
        done = np.max(np.abs(V_new - V)) < tol
        V = V_new
        if done:
            break
    return V


def perturb_value(V, eps, seed=0, mode="uniform"):
    """A value estimate strictly within ``eps`` of ``V`` in sup norm.

    ``mode="adversarial"`` alternates signs at magnitude just below ``eps``.
    """
    V = np.asarray(V, dtype=float)
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if eps == 0:
        return V.copy()
    inner = eps * (1.0 - 1e-9)
    if mode == "uniform":
        rng = np.random.default_rng(seed)
        return V + rng.uniform(-inner, inner, size=V.shape)
    if mode == "adversarial":
        signs = np.where(np.arange(V.size) % 2 == 0, 1.0, -1.0)
        if seed % 2:
            signs = -signs
        return V + inner * signs.reshape(V.shape)
    raise ValueError(f"unknown perturbation mode {mode!r}")


def perturb_policy(pi, eta, actions, seed=0):
    """Student action indices within action distance strictly below ``eta``."""
    pi = np.asarray(pi, dtype=int)
    actions = np.asarray(actions, dtype=float)
    if eta < 0:
        raise ValueError("eta must be non-negative")
    rng = np.random.default_rng(seed)
    out = pi.copy()
    for s, i in enumerate(pi):
        near = np.flatnonzero(np.abs(actions - actions[i]) < eta)
        if near.size:
            out[s] = near[rng.integers(near.size)]
    return out


def directed_policy(pi, cells, directions, n_actions):
    """Shift each state's action by ``cells`` grid steps along ``directions`` (+-1), clamped."""
    return np.clip(np.asarray(pi) + cells * np.asarray(directions), 0, n_actions - 1)


def relabel(pi, perm):
    """Policy on relabelled states ``f(s) = perm[s]``: ``out[perm[s]] = pi[s]``."""
    out = np.empty_like(pi)
    out[np.asarray(perm)] = pi
    return out


@dataclass
class LipschitzCertificate:
    L_R: float
    L_P: float


def estimate_lipschitz(mdp):
    """Largest finite-difference ratios over adjacent grid actions.

    On a 1-D grid the largest ratio over any pair of actions is attained by an
    adjacent pair, so these are the exact Lipschitz constants of the tabulated
    functions.  The transition numerator sums |dP| over next states.
    """
    da = np.diff(mdp.actions)
    if np.any(da <= 0):
        raise ValueError("action grid must be strictly increasing")
    if mdp.n_actions < 2:
        return LipschitzCertificate(0.0, 0.0)
    LR = float(np.max(np.abs(np.diff(mdp.R, axis=1)) / da[None, :]))
    LP = float(np.max(np.abs(np.diff(mdp.P, axis=1)).sum(axis=-1) / da[None, :]))
    return LipschitzCertificate(LR, LP)


@dataclass
class BoundReport:
    seed: int
    eps: float
    eta: float
    gamma: float
    n_states: int
    n_actions: int
    L_R: float
    L_P: float
    c: float
    lhs: float
    rhs: float
    classical_rhs: float
    slack: float
    holds: bool
    action_gap: float
    value_gap: float


def bound_constant(cert, gamma, V_star):
    return cert.L_R + gamma * cert.L_P * float(np.sum(V_star))


def bound_rhs(eps, eta, gamma, c):
    return (2.0 * eps * gamma + eta * c) / (1.0 - gamma)


def check_instance(mdp, eps, eta, seed, V_star=None, cert=None, relabel_states=False,
                   dump_dir=None, value_mode="uniform"):
    V_star = value_iteration(mdp) if V_star is None else V_star
    cert = estimate_lipschitz(mdp) if cert is None else cert
    V1 = perturb_value(V_star, eps, seed, value_mode)
    pi1 = greedy_policy(mdp, V1)
    pi2 = perturb_policy(pi1, eta, mdp.actions, seed + 7919)
    if relabel_states:
        # the student lives on relabelled states; query it through the inverse map
        perm = np.random.default_rng(seed).permutation(mdp.n_states)
        pi2_f = relabel(pi2, perm)
        pi2 = pi2_f[perm]
    V2 = policy_evaluation(mdp, pi2)
    c = bound_constant(cert, mdp.gamma, V_star)
    lhs = float(np.max(V_star - V2))
    rhs = bound_rhs(eps, eta, mdp.gamma, c)
    holds = lhs <= rhs + BOUND_TOL
    rep = BoundReport(seed, eps, eta, mdp.gamma, mdp.n_states, mdp.n_actions, cert.L_R, cert.L_P,
                      c, lhs, rhs, 2 * eps * mdp.gamma / (1 - mdp.gamma), rhs - lhs, bool(holds),
                      float(np.max(np.abs(mdp.actions[pi1] - mdp.actions[pi2]))),
                      float(np.max(np.abs(V1 - V_star))))
    if not holds and dump_dir is not None:
        dump_counterexample(dump_dir, mdp, V1, pi1, pi2, rep)
    return rep


def dump_counterexample(directory, mdp, V1, pi1, pi2, rep):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    stem = d / f"counterexample_seed{rep.seed}_eps{rep.eps}_eta{rep.eta}"
    np.savez(str(stem) + ".npz", P=mdp.P, R=mdp.R, gamma=mdp.gamma, actions=mdp.actions,
             V1=V1, pi1=pi1, pi2=pi2)
    Path(str(stem) + ".json").write_text(json.dumps(asdict(rep), indent=2))


def check_bound(n_mdps=200, eps_grid=(0.0, 0.01, 0.1), eta_grid=(0.0, 0.05, 0.1),
                gammas=(0.9, 0.99), seed=0, max_states=20, max_actions=11, dump_dir=None):
    """Ensemble check over generated MDPs and the (eps, eta) grid.

    Returns ``(reports, summary)``.
    """
    reports = []
    ss = np.random.SeedSequence(seed)
    for k, child in enumerate(ss.spawn(n_mdps)):
        rng = np.random.default_rng(child)
        S = int(rng.integers(2, max_states + 1))
        A = int(rng.integers(2, max_actions + 1))
        g = gammas[k % len(gammas)]
        inst_seed = int(rng.integers(2**31))
        mdp = generate_mdp(inst_seed, S, A, g)
        V_star = value_iteration(mdp)
        cert = estimate_lipschitz(mdp)
        for eps in eps_grid:
            for eta in eta_grid:
                reports.append(check_instance(mdp, eps, eta, inst_seed, V_star, cert,
                                              relabel_states=(k % 3 == 0), dump_dir=dump_dir))
    return reports, summarize(reports)


def summarize(reports):
    slack = np.array([r.slack for r in reports])
    violations = sum(not r.holds for r in reports)
    classical = [r for r in reports if r.eta == 0]
    classical_viol = sum(r.lhs > r.classical_rhs + BOUND_TOL for r in classical)
    ratios = [r.rhs / r.lhs for r in reports if r.lhs > 1e-12]
    return {
        "instances": len(reports),
        "violations": int(violations),
        "classical_violations": int(classical_viol),
        "min_slack": float(slack.min()) if slack.size else float("nan"),
        "max_slack": float(slack.max()) if slack.size else float("nan"),
        "min_rhs_over_lhs": float(min(ratios)) if ratios else float("inf"),
    }


def write_report(path, reports, summary):
    doc = {"summary": summary, "instances": [asdict(r) for r in reports]}
    Path(path).write_text(json.dumps(doc, indent=1, default=float))
    return path
