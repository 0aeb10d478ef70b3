"""Alternating mode discovery and RUL training with birth/merge structure search.

One iteration:

1. ingest any systems scheduled to arrive,
2. a few CAVI sweeps, hard assignment and silhouette,
3. pretraining (first iteration) or selective training of the prognostic nets,
4. J score on the validation systems and the iteration record,
5. convergence check, then, if the score did not drop since the previous
   iteration, a birth move followed by a merge move.

Structure changes made at the end of iteration ``t`` take effect in ``t + 1``,
so every record describes a structure that the networks were trained on.
"""
from __future__ import annotations

import csv
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import dpmm
from . import preprocess as pp
from . import prognostics as pg
from . import structure as st
from .datagen import SensorHistory
from .errors import InvalidInputError
from .metrics import nmi, rmse

log = logging.getLogger(__name__)

RECORD_FIELDS = ("iteration", "n_modes", "elbo", "silhouette", "val_rmse", "j_score", "search_score",
                 "gate_passed", "train_rmse", "test_rmse", "nmi", "n_systems")
EVENT_FIELDS = ("iteration", "event", "modes_before", "modes_after", "delta_j")


@dataclass
class PipelineConfig:
    max_iters: int = 40
    patience: int = 5
    cavi_sweeps: int = 5
    align: str = pp.TRUNCATE_PAD
    omega: float = 1e-3
    score: str = st.J_SCORE
    seed: int = 0
    window: int = 15
    alpha: float = 1.0
    kappa0: float = 1.0
    nu0: float = 3.0
    truncation: int = 20
    birth: st.BirthConfig = field(default_factory=st.BirthConfig)
    structure_every: int = 1
    pretrain_epochs: int = 50
    epochs_per_iter: int = 5
    learning_rate: float = 1e-2
    batch_size: int = 64
    merge_epochs: int = 3
    merge_fraction: float = 0.2
    val_fraction: float = 0.1
    unfreeze_window: int = 3
    rewarp_tol: float = 0.05
    min_mode_fraction: float = 0.05
    rul_cap: float | None = None
    normalize: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidInputError("max_iters must be >= 1")
        if self.patience < 1:
            raise InvalidInputError("patience must be >= 1")
        if self.score not in st.SCORE_VARIANTS:
            raise InvalidInputError(f"unknown score variant {self.score!r}")
        if self.align not in pp.STRATEGIES:
            raise InvalidInputError(f"unknown alignment strategy {self.align!r}")
        if self.omega <= 0:
            raise InvalidInputError("omega must be positive")
        if not 0 <= self.val_fraction < 1:
            raise InvalidInputError("val_fraction must lie in [0, 1)")
        if self.structure_every < 1:
            raise InvalidInputError("structure_every must be >= 1")


@dataclass
class IterationRecord:
    iteration: int
    n_modes: int
    elbo: float
    silhouette: float
    val_rmse: float
    j_score: float
    search_score: float
    gate_passed: bool
    train_rmse: float
    test_rmse: float
    nmi: float
    n_systems: int
    seconds: float


@dataclass
class StructureEvent:
    iteration: int
    event: str
    modes_before: int
    modes_after: int
    delta_j: float = float("nan")


@dataclass(frozen=True)
class StreamBatch:
    iteration: int
    systems: tuple[SensorHistory, ...]


@dataclass
class RunReport:
    config: PipelineConfig
    records: list[IterationRecord]
    events: list[StructureEvent]
    state: dpmm.VariationalState
    prior: dpmm.StickPrior
    params: pg.PrognosticParams
    train_ids: list[str]
    train_modes: list
    test_ids: list[str]
    test_assign: np.ndarray
    test_resp: np.ndarray
    test_true: np.ndarray
    test_pred: np.ndarray
    test_modes: list
    training_log: list[tuple[int, int, float]]
    converged: bool
    ref_len: int

    @property
    def final_modes(self) -> int:
        return self.records[-1].n_modes

    @property
    def test_rmse(self) -> float:
        return self.records[-1].test_rmse

    @property
    def final_nmi(self) -> float:
        return self.records[-1].nmi


def check_convergence(records: Sequence, patience: int) -> bool:
    """True iff the last ``patience`` records share one mode count."""
    if patience < 1:
        raise InvalidInputError("patience must be >= 1")
    if len(records) == 0:
        raise InvalidInputError("no records")
    if len(records) < patience:
        return False
    counts = {_count(r) for r in records[-patience:]}
    return len(counts) == 1


def _count(r):
    return r.n_modes if hasattr(r, "n_modes") else int(r)


def ingest(state: dpmm.VariationalState, new_obs: np.ndarray, obs: np.ndarray,
           prior: dpmm.StickPrior) -> dpmm.VariationalState:
    """Append systems with responsibility spread evenly over the occupied modes.

    ``obs`` is the full observation matrix including the new rows at the end.
    """
    new_obs = np.asarray(new_obs, dtype=float)
    if len(new_obs) == 0:
        return state
    held = st.occupied(state)
    if not held.any():
        held = np.ones(state.K, dtype=bool)
    rows = np.zeros((len(new_obs), state.K))
    rows[:, held] = 1.0 / held.sum()
    return dpmm.from_responsibilities(np.vstack([state.resp, rows]), obs, prior)


class _Fleet:
    """Training systems seen so far with their aligned vectors and windows."""

    def __init__(self, config: PipelineConfig, ref_len: int, rng: np.random.Generator, norm=None):
        self.config = config
        self.ref_len = ref_len
        self.rng = rng
        self.norm = norm
        self.histories: list[SensorHistory] = []
        self.obs = np.empty((0, 0))
        self.is_val = np.empty(0, dtype=bool)
        self.windows: pp.Windows | None = None

    def _prep(self, h: SensorHistory) -> SensorHistory:
        return pp.apply_normalization(self.norm, h) if self.norm is not None else h

    def add(self, systems: Sequence[SensorHistory]) -> np.ndarray:
        systems = list(systems)
        start = len(self.histories)
        vecs = np.array([pp.align(self._prep(h), self.ref_len, self.config.align).vector for h in systems])
        self.obs = vecs if start == 0 else np.vstack([self.obs, vecs])
        n_val = int(round(self.config.val_fraction * len(systems)))
        if self.config.val_fraction > 0 and len(systems) >= 10:
            n_val = max(n_val, 1)
        val = np.zeros(len(systems), dtype=bool)
        if n_val:
            val[self.rng.choice(len(systems), size=n_val, replace=False)] = True
        self.is_val = np.concatenate([self.is_val, val])
        self.histories.extend(systems)
        w = pp.fleet_windows(systems, self.config.window)
        w = pp.Windows(w.X, _cap(w.y, self.config.rul_cap), w.system_index + start)
        self.windows = w if self.windows is None else pp.Windows(
            np.concatenate([self.windows.X, w.X]), np.concatenate([self.windows.y, w.y]),
            np.concatenate([self.windows.system_index, w.system_index]))
        return vecs

    def split(self):
        on_val = self.is_val[self.windows.system_index]
        return self.windows.subset(~on_val), self.windows.subset(on_val)


def _cap(y, cap):
    return y if cap is None else np.minimum(y, cap)


def _mode_contexts(state: dpmm.VariationalState, center, scale) -> np.ndarray:
    enc = np.stack([pg.encode_mode(state.mode_params(k), center, scale) for k in range(state.K)])
    # unit mean-square input keeps the wide context layer's steps comparable to the others
    return enc / np.sqrt(enc.shape[1])


def _true_labels(histories) -> list | None:
    labels = [h.true_mode for h in histories]
    return None if any(m is None for m in labels) else labels


class _Runner:
    def __init__(self, config: PipelineConfig, train: Sequence[SensorHistory], test: Sequence[SensorHistory],
                 stream: Sequence[StreamBatch] = (), out_dir=None):
        if len(train) == 0:
            raise InvalidInputError("empty training fleet")
        self.config = c = config
        seeds = np.random.SeedSequence(c.seed).spawn(5)
        self.split_rng, self.init_rng, self.train_rng, self.birth_rng, self.merge_rng = (
            np.random.default_rng(s) for s in seeds)
        self.out_dir = out_dir
        self.stream = sorted(stream, key=lambda b: b.iteration)
        for b in self.stream:
            if not 1 <= b.iteration <= c.max_iters:
                raise InvalidInputError(f"stream batch arrives at iteration {b.iteration}, outside 1..{c.max_iters}")
        self.last_arrival = max((b.iteration for b in self.stream), default=0)

        self.norm = pp.fit_normalization(train) if c.normalize else None
        self.ref_len = pp.reference_length(train)
        self.fleet = _Fleet(c, self.ref_len, self.split_rng, self.norm)
        self.fleet.add(train)
        self.prior = dpmm.default_prior(self.fleet.obs, c.alpha, c.kappa0, c.nu0)
        self.ctx_center = self.prior.base.m0
        self.ctx_scale = np.sqrt(self.prior.base.psi0)
        self.state = dpmm.init_state(self.fleet.obs, self.prior)

        self.test = list(test)
        tw = pp.final_windows(self.test, c.window)
        self.test_windows = pp.Windows(tw.X, _cap(tw.y, c.rul_cap), tw.system_index)
        mean_life = float(np.mean([h.length for h in train]))
        self.test_horizon = np.array([max(h.length, mean_life) for h in self.test], dtype=float)
        self.test_obs = self._align_test()
        self.test_pred = np.full(len(self.test), np.nan)

        sensor_stats = pp.fit_normalization(train)
        fit, _ = self.fleet.split()
        y_scale = float(np.mean(fit.y)) if len(fit) and np.mean(fit.y) > 0 else 1.0
        S = train[0].n_sensors
        self.params = pg.init_params(S, c.window, 2 * self.fleet.obs.shape[1], self.init_rng,
                                     in_mean=sensor_stats.mean, in_sd=sensor_stats.sd, y_scale=y_scale)
        self.records: list[IterationRecord] = []
        self.events: list[StructureEvent] = []
        self.training_log: list[tuple[int, int, float]] = []
        self.converged = False
        self.prev_score = None
        self.passes: list[bool] = []

    # test-side alignment

    def _align_test(self):
        if not self.test:
            return np.empty((0, self.fleet.obs.shape[1]))
        rows = []
        for h, hz in zip(self.test, self.test_horizon):
            h = pp.apply_normalization(self.norm, h) if self.norm is not None else h
            rows.append(pp.align(h, self.ref_len, self.config.align, horizon=hz).vector)
        return np.array(rows)

    def _maybe_rewarp(self, new_pred):
        if self.config.align != pp.TEMPORAL_WARP or not self.test:
            return
        old = self.test_pred
        if np.all(np.isnan(old)):
            changed = np.ones(len(new_pred), dtype=bool)
        else:
            changed = np.abs(new_pred - old) > self.config.rewarp_tol * np.maximum(np.abs(old), 1.0)
        if changed.any():
            lengths = np.array([h.length for h in self.test], dtype=float)
            self.test_horizon[changed] = lengths[changed] + np.maximum(new_pred[changed], 0.0)
            self.test_obs = self._align_test()

    # scoring

    def _contexts(self, state):
        return _mode_contexts(state, self.ctx_center, self.ctx_scale)

    def _window_modes(self, labels, windows):
        return labels[windows.system_index]

    def _val_loss(self, params, state, labels, val, embeddings=None):
        if len(val) == 0:
            return 0.0
        return pg.rul_loss(params, val, self._contexts(state), self._window_modes(labels, val), embeddings)

    def _score(self, elbo_value, sil, val_loss):
        if self.config.score == st.ELBO_SCORE:
            return elbo_value
        if self.config.score == st.RUL_SCORE:
            return -val_loss
        return sil - self.config.omega * val_loss

    def _merge_scorer(self, iteration):
        """Score function for merge candidates: short context/head retraining, then the score."""
        c = self.config
        obs = self.fleet.obs
        if c.score == st.ELBO_SCORE:
            return lambda s: dpmm.elbo(s, obs, self.prior)
        fit, val = self.fleet.split()
        n_sub = max(1, int(round(c.merge_fraction * len(fit))))
        pick = np.sort(self.merge_rng.choice(len(fit), size=n_sub, replace=False))
        sub = fit.subset(pick)
        frozen = self.params.copy()
        frozen.frozen = {"signal": True, "context": False, "head": False}
        sub_emb = pg.embed_signal(frozen, sub.X)
        val_emb = pg.embed_signal(frozen, val.X) if len(val) else None
        seed = int(self.merge_rng.integers(2**32))

        def score(s):
            labels = dpmm.hard_assign(s)
            ctx = self._contexts(s)
            p = _train_cached(frozen, sub, sub_emb, ctx, labels[sub.system_index], c.merge_epochs,
                              c.learning_rate, np.random.default_rng(seed), c.batch_size)
            loss = self._val_loss(p, s, labels, val, val_emb)
            if c.score == st.RUL_SCORE:
                return -loss
            return st.j_score(obs, labels, loss, c.omega).score

        return score

    # one iteration

    def _ingest(self, it):
        for batch in self.stream:
            if batch.iteration == it and batch.systems:
                new = self.fleet.add(batch.systems)
                self.state = ingest(self.state, new, self.fleet.obs, self.prior)
                log.info("iteration %d: %d systems arrived", it, len(new))

    def _train(self, it, labels):
        c = self.config
        fit, _ = self.fleet.split()
        ctx = self._contexts(self.state)
        modes = self._window_modes(labels, fit)
        curve = []
        if not self.params.pretrained:
            self.params = pg.pretrain(self.params, fit, ctx, modes, c.pretrain_epochs, c.learning_rate,
                                      self.train_rng, c.batch_size, curve, it)
        else:
            self.params = pg.apply_freeze_schedule(self.params, it)
            self.params = pg.train(self.params, fit, ctx, modes, c.epochs_per_iter, c.learning_rate,
                                   self.train_rng, c.batch_size, curve, it)
        self.training_log.extend(curve)
        return fit

    def _test_predict(self):
        if not self.test:
            return np.empty((0, self.state.K)), np.empty(0, dtype=int), np.empty(0)
        resp = dpmm.predictive_responsibilities(self.state, self.test_obs)
        assign = dpmm.hard_assign(resp)
        pred = pg.forward(self.params, self.test_windows.X, self._contexts(self.state), assign)
        return resp, assign, pred

    def iterate(self, it) -> bool:
        """Run one iteration; returns True once converged."""
        c = self.config
        t0 = time.perf_counter()
        obs = self.fleet.obs
        self._ingest(it)
        obs = self.fleet.obs
        self.state = dpmm.run_cavi(self.state, obs, self.prior, c.cavi_sweeps)
        elbo_value = dpmm.elbo(self.state, obs, self.prior)
        labels = dpmm.hard_assign(self.state)
        sil = st.silhouette(obs, labels)
        modes_now = st.n_modes(self.state)

        fit = self._train(it, labels)
        _, val = self.fleet.split()
        val_loss = self._val_loss(self.params, self.state, labels, val)
        j = sil - c.omega * val_loss
        score = self._score(elbo_value, sil, val_loss)
        train_rmse = pg.rul_loss(self.params, fit, self._contexts(self.state), self._window_modes(labels, fit))
        resp, assign, pred = self._test_predict()
        self.last_test = (resp, assign, pred)
        test_rmse = rmse(pred, self.test_windows.y) if len(pred) else float("nan")
        self._maybe_rewarp(pred)
        self.test_pred = pred
        truth = _true_labels(self.fleet.histories)
        nmi_value = nmi(truth, labels) if truth is not None else float("nan")

        record = IterationRecord(it, modes_now, elbo_value, sil, val_loss, j, score, False, train_rmse,
                                 test_rmse, nmi_value, len(obs), 0.0)
        self.records.append(record)

        # convergence only counts structure-tested iterations after the last arrival
        eligible = [r for r, prev in zip(self.records[1:], self.passes) if prev and r.iteration > self.last_arrival]
        if len(eligible) >= c.patience and check_convergence(eligible, c.patience):
            self.converged = True
        gate = (
            not self.converged
            and it < c.max_iters
            and self.prev_score is not None
            and (it - 1) % c.structure_every == 0
            and score - self.prev_score >= 0
        )
        self.prev_score = score
        if gate:
            self._structure_pass(it)
        record.gate_passed = gate
        self.passes.append(gate)
        record.seconds = time.perf_counter() - t0
        return self.converged

    def _structure_pass(self, it):
        c = self.config
        obs = self.fleet.obs
        before = st.n_modes(self.state)
        scorer = self._merge_scorer(it)
        grown, birth = st.birth_move(self.state, obs, self.prior, c.birth, self.birth_rng, c.truncation)
        after_birth = st.n_modes(grown)
        if birth.added:
            self.events.append(StructureEvent(it, "birth", before, after_birth))
        min_size = st.min_mode_size(len(obs), c.min_mode_fraction)
        merged, report = st.merge_move(grown, obs, self.prior, scorer, min_size)
        after_prune = st.n_modes(report.pruned)
        if after_prune != after_birth:
            self.events.append(StructureEvent(it, "merge", after_birth, after_prune))
        if report.accepted is not None:
            self.events.append(StructureEvent(it, "merge", after_prune, st.n_modes(merged), report.accepted.delta_j))
        elif report.candidates:
            best = max(cand.delta_j for cand in report.candidates)
            self.events.append(StructureEvent(it, "reject", after_prune, after_prune, best))
        state = dpmm.cavi_sweep(merged, obs, self.prior)
        state, _ = st.prune_empty(state, obs, self.prior, min_size)
        self.state = st.sort_by_mass(state, self.prior)
        after = st.n_modes(self.state)
        self.params = pg.unfreeze_on_structure_change(self.params, it + 1, after != before, c.unfreeze_window)

    # outputs

    def report(self) -> RunReport:
        resp, assign, pred = self.last_test
        truth = [h.true_mode for h in self.fleet.histories]
        return RunReport(
            self.config, self.records, self.events, self.state, self.prior, self.params,
            [h.system_id for h in self.fleet.histories], truth,
            [h.system_id for h in self.test], assign, resp, self.test_windows.y.copy(), pred,
            [h.true_mode for h in self.test], self.training_log, self.converged, self.ref_len,
        )

    def checkpoint(self):
        if self.out_dir is None:
            return
        dpmm.save_state(os.path.join(self.out_dir, "checkpoint_state.npz"), self.state, self.prior)
        pg.save_params(os.path.join(self.out_dir, "checkpoint_params.npz"), self.params)
        write_csv(os.path.join(self.out_dir, "records.csv"), RECORD_FIELDS,
                  [_record_row(r) for r in self.records])
        write_csv(os.path.join(self.out_dir, "events.csv"), EVENT_FIELDS,
                  [_event_row(e) for e in self.events])
        write_csv(os.path.join(self.out_dir, "training_log.csv"), ("iteration", "epoch", "loss"),
                  [(i, e, _fmt(l)) for i, e, l in self.training_log])


def _train_cached(params, windows, embeddings, contexts, modes, epochs, rate, rng, batch_size):
    """Context/head training on precomputed signal embeddings."""
    out = params.copy()
    n = len(windows)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, grads = pg.loss_and_grads(out, None, windows.y[idx], contexts, modes[idx], ("context", "head"),
                                         embeddings=embeddings[idx])
            pg._apply(out, grads, rate)
    return out


def run(config: PipelineConfig, train: Sequence[SensorHistory], test: Sequence[SensorHistory] = (),
        stream: Sequence[StreamBatch] = (), out_dir=None) -> RunReport:
    """Run the full loop; writes the run outputs under ``out_dir`` when given."""
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    runner = _Runner(config, train, test, stream, out_dir)
    for it in range(1, config.max_iters + 1):
        try:
            done = runner.iterate(it)
        except Exception:
            log.exception("iteration %d failed; last checkpoint kept", it)
            raise
        runner.checkpoint()
        log.info("iteration %d: %d modes, J %.4f, test RMSE %.2f", it, runner.records[-1].n_modes,
                 runner.records[-1].j_score, runner.records[-1].test_rmse)
        if done:
            break
    report = runner.report()
    if out_dir is not None:
        write_outputs(out_dir, report)
    return report


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return repr(float(x))


def _record_row(r: IterationRecord):
    d = asdict(r)
    return [_fmt(d[f]) for f in RECORD_FIELDS]


def _event_row(e: StructureEvent):
    return [str(e.iteration), e.event, str(e.modes_before), str(e.modes_after), _fmt(e.delta_j)]


def write_csv(path, header, rows) -> None:
    """Write a CSV atomically (temp file then rename)."""
    d = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".csv")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_outputs(out_dir, report: RunReport) -> None:
    K = report.state.K
    resp_cols = [f"r_{k}" for k in range(K)]
    rows = []
    train_labels = dpmm.hard_assign(report.state)
    for i, sid in enumerate(report.train_ids):
        rows.append([sid, "train", str(train_labels[i]), report.train_modes[i] or "",
                     *(_fmt(v) for v in report.state.resp[i])])
    for i, sid in enumerate(report.test_ids):
        rows.append([sid, "test", str(report.test_assign[i]), report.test_modes[i] or "",
                     *(_fmt(v) for v in report.test_resp[i])])
    write_csv(os.path.join(out_dir, "final_assignments.csv"),
              ("system_id", "set", "mode", "true_mode", *resp_cols), rows)
    write_csv(os.path.join(out_dir, "predictions.csv"), ("system_id", "true_rul", "predicted_rul"),
              [[sid, _fmt(t), _fmt(p)] for sid, t, p in zip(report.test_ids, report.test_true, report.test_pred)])
