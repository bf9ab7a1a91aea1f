"""Checkpoint policies and the binomial (revolve-style) schedule.

A checkpoint slot holds one full `StepRecord` (state, stage states, end
state); `Nc` counts those state slots.  `revolve_count` evaluates the
closed-form minimal-recomputation count; `dp_optimal_count` recomputes it
independently from the classical checkpointing recurrence adapted to
stage-storing checkpoints; `revolve_schedule` emits an action sequence whose
recomputation total matches the closed form exactly and never holds more
than `Nc` records at once.

Schedule executor semantics: `restore(k)` reloads record k, positioning the
sweep at step k+1 (records carry their end state); `restore(-1)` rewinds to
the initial state; `advance(i, j)` re-runs steps i..j-1; `reverse(k)`
consumes record k from the live slot or, if k was just re-run, in hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


def _binom(n, k):
    if k < 0 or n < 0 or k > n:
        return 0
    return math.comb(n, k)


def revolve_count(nt: int, nc: int) -> int:
    """Minimal extra forward steps to reverse nt steps under nc slots."""
    if nt < 1 or nc < 1:
        raise ValueError("need nt >= 1 and nc >= 1")
    if nt == 1:
        return 0
    t = 1
    while not (_binom(nc + t - 1, t - 1) < nt <= _binom(nc + t, t)):
        t += 1
    return (t - 1) * nt - _binom(nc + t, t - 1) + 1


@lru_cache(maxsize=None)
def _dp(l: int, c: int) -> int:
    # classical split recurrence with stage-storing checkpoint base cases
    if l <= 1 or c >= l - 1:
        return 0
    if c == 1:
        return (l - 1) * (l - 2) // 2
    return min((m - 1) + _dp(l - m, c - 1) + _dp(m, c) for m in range(1, l))


def dp_optimal_count(nt: int, nc: int) -> int:
    """Independent dynamic-programming recomputation count (desk scale)."""
    if nt < 1 or nc < 1:
        raise ValueError("need nt >= 1 and nc >= 1")
    return _dp(nt, nc)


def _argmin_split(l: int, c: int) -> int:
    best, best_m = None, None
    for m in range(1, l):
        v = (m - 1) + _dp(l - m, c - 1) + _dp(m, c)
        if best is None or v < best:
            best, best_m = v, m
    return best_m


@dataclass(frozen=True)
class ScheduleAction:
    kind: str          # advance | store | restore | reverse
    step: int = -1     # store/restore/reverse target (restore -1 = initial state)
    start: int = -1    # advance range [start, stop)
    stop: int = -1

    def __repr__(self):
        if self.kind == "advance":
            return f"advance({self.start}->{self.stop})"
        return f"{self.kind}({self.step})"


def revolve_schedule(nt: int, nc: int):
    """Action sequence reversing steps nt-1..0 with at most nc live records."""
    if nt < 1 or nc < 1:
        raise ValueError("need nt >= 1 and nc >= 1")
    acts = []

    def adv(i, j):
        acts.append(ScheduleAction("advance", start=i, stop=j))

    def store(k):
        acts.append(ScheduleAction("store", step=k))

    def restore(k):
        acts.append(ScheduleAction("restore", step=k))

    def rev(k):
        acts.append(ScheduleAction("reverse", step=k))

    def gen(o, l, c, anchor):
        # plain segment [o, o+l); executor position is o on entry
        if l == 0:
            return
        if l == 1:
            adv(o, o + 1)
            rev(o)
            return
        if c >= l - 1:
            for k in range(o, o + l - 1):
                adv(k, k + 1)
                store(k)
            adv(o + l - 1, o + l)
            rev(o + l - 1)
            for k in reversed(range(o, o + l - 1)):
                restore(k)
                rev(k)
            return
        if c == 1:
            adv(o, o + 1)
            store(o)
            adv(o + 1, o + l)
            rev(o + l - 1)
            for k in reversed(range(o + 1, o + l - 1)):
                restore(o)
                adv(o + 1, k + 1)
                rev(k)
            restore(o)
            rev(o)
            return
        m = _argmin_split(l, c)
        adv(o, o + m)
        store(o + m - 1)
        gen(o + m, l - m, c - 1, anchor=o + m - 1)
        restore(anchor)
        gen_pre(o, m, c, anchor)

    def gen_pre(o, l, c_total, anchor):
        # segment [o, o+l) whose last record (o+l-1) is already slotted;
        # c_total counts the slots at its disposal including that one
        if l == 1:
            rev(o)
            return
        if c_total >= l - 1:
            for k in range(o, o + l - 2):
                adv(k, k + 1)
                store(k)
            adv(o + l - 2, o + l - 1)
            rev(o + l - 1)
            rev(o + l - 2)
            for k in reversed(range(o, o + l - 2)):
                restore(k)
                rev(k)
            return
        if c_total == 1:
            rev(o + l - 1)
            for k in reversed(range(o, o + l - 1)):
                restore(anchor)
                adv(o, k + 1)
                rev(k)
            return
        m = _argmin_split(l, c_total)
        adv(o, o + m)
        store(o + m - 1)
        gen_pre(o + m, l - m, c_total - 1, anchor=o + m - 1)
        restore(anchor)
        gen_pre(o, m, c_total, anchor)

    gen(0, nt, nc, anchor=-1)
    return acts


@dataclass(frozen=True)
class CheckpointPolicy:
    kind: str          # store_all | store_solutions | revolve
    nc: int = 0

    def __post_init__(self):
        if self.kind not in {"store_all", "store_solutions", "revolve"}:
            raise ValueError(f"unknown checkpoint policy {self.kind!r}")
        if self.kind == "revolve" and self.nc < 1:
            raise ValueError("revolve requires nc >= 1")

    @staticmethod
    def parse(text: str) -> "CheckpointPolicy":
        text = text.strip()
        if text.startswith("revolve"):
            nc = int(text.split(":", 1)[1]) if ":" in text else 1
            return CheckpointPolicy("revolve", nc)
        return CheckpointPolicy(text)


@dataclass
class StoreCounters:
    stored_states: int = 0
    stored_stage_vectors: int = 0
    max_live_slots: int = 0
    recomputed_steps: int = 0


class CheckpointStore:
    """Forward-pass sink plus reverse-pass record source for one grad call.

    Records handed out in reverse order are bit-identical to the forward
    pass: either stored outright or recomputed by the deterministic replay
    closure from a stored state.
    """

    def __init__(self, policy: CheckpointPolicy, n_steps=None, u0=None):
        self.policy = policy
        self.n_steps = n_steps
        self.u0 = None if u0 is None else np.array(u0, dtype=np.float64)
        self.counters = StoreCounters()
        self._meta = []            # (t, h) per step, for replay
        self._slots = {}           # step -> StepRecord (deep copies)
        self._solutions = {}       # step -> state copy (store_solutions)
        self._final = None         # last step's record, held out of the store
        self._schedule = None
        self._store_in_forward = None
        if policy.kind == "revolve":
            if n_steps is None:
                raise ValueError("revolve needs the step count upfront (fixed stepping)")
            self._schedule = revolve_schedule(n_steps, policy.nc)
            first_rev = next(i for i, a in enumerate(self._schedule) if a.kind == "reverse")
            self._store_in_forward = {
                a.step for a in self._schedule[:first_rev] if a.kind == "store"
            }
            self._phase2 = self._schedule[first_rev:]

    def _copy_record(self, rec):
        from .integrators import StepRecord

        return StepRecord(
            n=rec.n, t=rec.t, h=rec.h, u=rec.u.copy(),
            stages=[s.copy() for s in rec.stages],
            u_next=rec.u_next.copy(), accepted=rec.accepted,
        )

    def _bump_live(self):
        self.counters.max_live_slots = max(self.counters.max_live_slots, len(self._slots))

    def on_step(self, rec):
        """Forward-pass sink."""
        kind = self.policy.kind
        is_last = self.n_steps is not None and rec.n == self.n_steps - 1
        if kind == "store_all":
            if is_last or self.n_steps is None:
                # the reverse pass starts here; keep out of the store
                self._final = self._copy_record(rec)
            if not is_last:
                self._slots[rec.n] = self._copy_record(rec)
                self.counters.stored_states += 1
                self.counters.stored_stage_vectors += len(rec.stages)
        elif kind == "store_solutions":
            if is_last or self.n_steps is None:
                self._final = self._copy_record(rec)
            if not is_last:
                self._solutions[rec.n] = rec.u.copy()
                self.counters.stored_states += 1
        else:  # revolve
            if rec.n in self._store_in_forward:
                self._slots[rec.n] = self._copy_record(rec)
                self.counters.stored_states += 1
                self.counters.stored_stage_vectors += len(rec.stages)
                self._bump_live()
            if rec.n == self.n_steps - 1:
                # the sweep ends here; the reverse phase starts from this record
                self._final = self._copy_record(rec)
        self._meta.append((rec.t, rec.h))

    def finalize(self):
        if self.n_steps is None:
            # adaptive run: length only known now
            self.n_steps = len(self._meta)
            last = self.n_steps - 1
            if self.policy.kind == "store_all" and last in self._slots:
                popped = self._slots.pop(last)
                self.counters.stored_states -= 1
                self.counters.stored_stage_vectors -= len(popped.stages)
            if self.policy.kind == "store_solutions" and last in self._solutions:
                self._solutions.pop(last)
                self.counters.stored_states -= 1
        if self.policy.kind != "revolve":
            self.counters.max_live_slots = max(len(self._slots), len(self._solutions))

    def reverse_records(self, replay, counters):
        """Yield StepRecords for n = N-1 .. 0.

        `replay(u, t, h, counters)` recomputes one step (bit-identical).
        """
        kind = self.policy.kind
        n_steps = self.n_steps
        if kind == "store_all":
            yield self._final
            for n in reversed(range(n_steps - 1)):
                yield self._slots[n]
        elif kind == "store_solutions":
            yield self._final
            for n in reversed(range(n_steps - 1)):
                t, h = self._meta[n]
                rec = replay(self._solutions[n], t, h, counters)
                rec.n = n
                self.counters.recomputed_steps += 1
                yield rec
        else:
            yield from self._revolve_reverse(replay, counters)

    def _revolve_reverse(self, replay, counters):
        in_hand = self._final   # last forward record, in hand when the sweep ends
        state = None if self._final is None else self._final.u_next.copy()
        for act in self._phase2:
            if act.kind == "restore":
                if act.step == -1:
                    state = self.u0.copy()
                else:
                    state = self._slots[act.step].u_next.copy()
                in_hand = None
            elif act.kind == "advance":
                for n in range(act.start, act.stop):
                    t, h = self._meta[n]
                    rec = replay(state, t, h, counters)
                    rec.n = n
                    state = rec.u_next
                    in_hand = rec
                    self.counters.recomputed_steps += 1
            elif act.kind == "store":
                if in_hand is None or in_hand.n != act.step:
                    raise RuntimeError(f"schedule bug: no record {act.step} in hand")
                if len(self._slots) >= self.policy.nc:
                    raise RuntimeError("schedule bug: slot capacity exceeded")
                self._slots[act.step] = self._copy_record(in_hand)
                self._bump_live()
            else:  # reverse
                if in_hand is not None and in_hand.n == act.step:
                    rec = in_hand
                elif act.step in self._slots:
                    rec = self._slots.pop(act.step)
                else:
                    raise RuntimeError(f"schedule bug: record {act.step} unavailable")
                yield rec


def audit_schedule(nt: int, nc: int):
    """Dry-run a schedule; returns (extra_advances, max_live_slots).

    The first contiguous advances cover the initial forward pass exactly
    once; everything after the first reverse is recomputation.
    """
    acts = revolve_schedule(nt, nc)
    slots = set()
    max_live = 0
    advanced = 0
    seen_reverse = False
    extra = 0
    reversed_steps = []
    pos = 0
    in_hand = None
    for a in acts:
        if a.kind == "advance":
            if a.start != pos:
                raise AssertionError(f"advance from {a.start} but position is {pos}")
            n = a.stop - a.start
            advanced += n
            if seen_reverse:
                extra += n
            pos = a.stop
            in_hand = a.stop - 1
        elif a.kind == "store":
            if a.step != in_hand:
                raise AssertionError("store of a record not in hand")
            slots.add(a.step)
            max_live = max(max_live, len(slots))
        elif a.kind == "restore":
            pos = a.step + 1
            in_hand = None
        else:
            if in_hand == a.step:
                pass
            elif a.step in slots:
                slots.remove(a.step)
            else:
                raise AssertionError(f"reverse({a.step}) without a record")
            if not seen_reverse:
                if advanced != nt:
                    raise AssertionError("initial pass length mismatch")
                seen_reverse = True
            reversed_steps.append(a.step)
    if reversed_steps != list(reversed(range(nt))):
        raise AssertionError("steps not reversed exactly once in descending order")
    return extra, max_live
