"""Broker-local adaptive server selection inside a mirrored server set.

Every broker keeps its own :class:`ServerStats` per ``(table, server)`` and
never shares them. Scores are lower-is-better:

* ``inflight``     requests dispatched but not yet answered
* ``latency_ema``  exponential moving average of response latency (ms)
* ``hybrid``       ``(inflight + queue_ema + 1) ** N * latency_ema``

``argmin`` mode takes the lowest score (earliest in list order on ties);
``softmax`` mode samples server i with probability proportional to
``exp(-score_i / tau)``.

``queue_ema`` is sampled from the pre-dispatch in-flight count on every
dispatch. A server that gets no traffic would otherwise keep the queue
estimate it had when it was abandoned, so with ``queue_sample_ms`` set,
:meth:`ServerSelector.refresh_idle` also samples the current in-flight
count of any server not dispatched to for that long. Likewise a latency
estimate with no response for ``latency_decay_ms`` takes one EMA step
toward the cold-start prior, so an abandoned server is eventually probed
again instead of being judged forever on its last bad answers.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

SCORERS = ("round_robin", "inflight", "latency_ema", "hybrid")
MODES = ("argmin", "softmax")
TAU_RULES = ("min", "max", "mean")
EPSILON = 1e-9


class NoEligibleServer(RuntimeError):
    """Every server of the set is excluded; the query must fail fast."""


@dataclass
class ServerStats:
    inflight: int = 0
    latency_ema: float = 1.0
    queue_ema: float = 0.0
    last_sample_ms: float = 0.0
    last_response_ms: float = 0.0


@dataclass(frozen=True)
class SelectionPolicy:
    scorer: str = "hybrid"
    mode: str = "argmin"
    tau_rule: str = "min"
    alpha: float = 2 / 3
    exponent: float = 3.0
    latency_prior_ms: float = 1.0
    queue_sample_ms: float = 0.0
    latency_decay_ms: float = 0.0
    tau_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.scorer not in SCORERS:
            raise ValueError(f"unknown scorer {self.scorer!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.tau_rule not in TAU_RULES:
            raise ValueError(f"unknown tau rule {self.tau_rule!r}")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.latency_prior_ms < 0:
            raise ValueError("latency prior must be >= 0")
        if self.queue_sample_ms < 0 or self.latency_decay_ms < 0:
            raise ValueError("idle refresh periods must be >= 0")
        if self.tau_scale <= 0:
            raise ValueError("tau_scale must be > 0")


def ema(value: float, previous: float, alpha: float) -> float:
    return alpha * value + (1 - alpha) * previous


def hybrid_score(stats: ServerStats, exponent: float) -> float:
    return (stats.inflight + stats.queue_ema + 1) ** exponent * stats.latency_ema


def softmax_probabilities(scores: list[float], tau_rule: str = "min",
                          tau_scale: float = 1.0) -> list[float]:
    """Selection probabilities ``exp(-s/tau) / sum``.

    ``tau`` comes from the score magnitudes: the smallest, largest or mean
    score times ``tau_scale``, floored at ``EPSILON``. Exponents are shifted by the best score
    before exponentiating so nothing overflows or underflows to all-zero.
    """
    if not scores:
        return []
    lo = min(scores)
    if tau_rule == "max":
        tau = max(scores)
    elif tau_rule == "mean":
        tau = sum(scores) / len(scores)
    else:
        tau = lo
    tau = max(tau * tau_scale, EPSILON)
    weights = [math.exp(-(s - lo) / tau) for s in scores]
    total = sum(weights)
    return [w / total for w in weights]


@dataclass
class ServerSelector:
    """One broker's scoring state and selection logic."""

    policy: SelectionPolicy = field(default_factory=SelectionPolicy)
    stats: dict[tuple[str, str], ServerStats] = field(default_factory=dict)
    orphan_responses: int = 0
    score_evaluations: int = 0
    _rr: dict[tuple, int] = field(default_factory=dict, repr=False)

    def register_server(self, table: str, server: str, latency_prior: float | None = None) -> ServerStats:
        key = (table, server)
        if key in self.stats:
            return self.stats[key]
        prior = self.policy.latency_prior_ms if latency_prior is None else latency_prior
        if prior <= 0:
            log.warning(
                "latency prior %s for %s/%s: an idle server scores 0 and will attract "
                "all traffic until it answers", prior, table, server,
            )
        st = ServerStats(inflight=0, latency_ema=prior, queue_ema=0.0)
        self.stats[key] = st
        return st

    def _get(self, table: str, server: str) -> ServerStats:
        st = self.stats.get((table, server))
        return st if st is not None else self.register_server(table, server)

    def on_dispatch(self, table: str, server: str, now_ms: float | None = None) -> None:
        st = self._get(table, server)
        if now_ms is not None:
            st.last_sample_ms = now_ms
        st.queue_ema = ema(st.inflight, st.queue_ema, self.policy.alpha)
        st.inflight += 1

    def on_response(self, table: str, server: str, latency_ms: float,
                    now_ms: float | None = None) -> None:
        st = self._get(table, server)
        if now_ms is not None:
            st.last_response_ms = now_ms
        if st.inflight == 0:
            self.orphan_responses += 1
            log.debug("response from %s/%s without a matching dispatch", table, server)
        else:
            st.inflight -= 1
        st.latency_ema = ema(latency_ms, st.latency_ema, self.policy.alpha)

    def refresh_idle(self, now_ms: float) -> int:
        """Timer-driven refresh of stats that traffic has stopped updating."""
        policy = self.policy
        q_period, l_period = policy.queue_sample_ms, policy.latency_decay_ms
        if q_period <= 0 and l_period <= 0:
            return 0
        alpha = policy.alpha
        touched = 0
        for st in self.stats.values():
            if q_period > 0 and now_ms - st.last_sample_ms >= q_period:
                st.queue_ema = ema(st.inflight, st.queue_ema, alpha)
                st.last_sample_ms = now_ms
                touched += 1
            if l_period > 0 and now_ms - st.last_response_ms >= l_period:
                st.latency_ema = ema(policy.latency_prior_ms, st.latency_ema, alpha)
                st.last_response_ms = now_ms
                touched += 1
        return touched

    def score(self, table: str, server: str) -> float:
        st = self._get(table, server)
        self.score_evaluations += 1
        scorer = self.policy.scorer
        if scorer == "inflight":
            return float(st.inflight)
        if scorer == "latency_ema":
            return st.latency_ema
        return hybrid_score(st, self.policy.exponent)

    def probabilities(self, table: str, mss: list[str]) -> list[float]:
        scores = [self.score(table, s) for s in mss]
        return softmax_probabilities(scores, self.policy.tau_rule, self.policy.tau_scale)

    def select(
        self,
        table: str,
        mss: list[str],
        rng: random.Random | None = None,
        unavailable: frozenset[str] | set[str] = frozenset(),
    ) -> str:
        """Pick one server of ``mss``; servers in ``unavailable`` are skipped."""
        eligible = [s for s in mss if s not in unavailable]
        if not eligible:
            raise NoEligibleServer(f"no serving replica among {mss}")
        if self.policy.scorer == "round_robin":
            key = (table, tuple(mss))
            k = self._rr.get(key, 0)
            self._rr[key] = k + 1
            return eligible[k % len(eligible)]
        scores = [self.score(table, s) for s in eligible]
        if self.policy.mode == "argmin":
            best = 0
            for i in range(1, len(scores)):
                if scores[i] < scores[best]:
                    best = i
            return eligible[best]
        probs = softmax_probabilities(scores, self.policy.tau_rule, self.policy.tau_scale)
        u = (rng or random).random()
        acc = 0.0
        for server, p in zip(eligible, probs):
            acc += p
            if u < acc:
                return server
        return eligible[-1]
