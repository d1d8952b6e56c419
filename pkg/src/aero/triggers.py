"""Rule evaluation: periodic timers and input-update rules.

One logical evaluation loop owns all schedules and pending-update sets;
``tick`` and ``on_commit`` are serialized by an internal lock and hand
dispatches back to the caller without ever blocking on flow execution.
State is held in memory and written through to the shared store when one
is attached, so a restarted service resumes schedules and partially
accumulated ALL-rule sets.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Callable

from .db import Database
from .errors import UnknownAsset
from .model import FlowDispatch, FlowSpec, RuleKind, TriggerRule, isots, parse_ts


@dataclass
class TimerSchedule:
    flow_id: str
    interval_s: float
    anchor_at: datetime
    next_due: datetime
    last_fired: datetime | None = None


def rule_satisfied(rule: TriggerRule, pending: set[str], monitored: set[str]) -> bool:
    """Pure rule check. Periodic rules never fire from pending updates;
    timers go through tick."""
    if not pending <= monitored:
        raise ValueError("pending params must be a subset of monitored params")
    if rule.kind is RuleKind.PERIODIC:
        return False
    if rule.kind is RuleKind.ON_ANY_INPUT_UPDATE:
        return bool(pending)
    return pending == monitored


class TriggerEngine:
    def __init__(self, db: Database | None = None, asset_exists: Callable[[str], bool] | None = None):
        self._db = db
        self._asset_exists = asset_exists
        self._lock = threading.RLock()
        self._schedules: dict[str, TimerSchedule] = {}
        self._pending: dict[str, set[str]] = {}
        self._rules: dict[str, TriggerRule] = {}
        self._monitored: dict[str, set[str]] = {}
        # asset -> {(flow_id, param)} for update-ruled flows only
        self._deps: dict[str, set[tuple[str, str]]] = {}

    # -- flow lifecycle ---------------------------------------------------------

    def install_flow(self, spec: FlowSpec, now: datetime) -> None:
        """Install the flow's trigger: a timer schedule for periodic rules
        (first due one interval after registration), or dependency-index
        entries for update rules."""
        with self._lock:
            self._rules[spec.flow_id] = spec.rule
            if spec.rule.kind is RuleKind.PERIODIC:
                schedule = TimerSchedule(
                    flow_id=spec.flow_id,
                    interval_s=float(spec.rule.interval_s),
                    anchor_at=now,
                    next_due=now + timedelta(seconds=spec.rule.interval_s),
                )
                self._schedules[spec.flow_id] = schedule
                self._persist_schedule(schedule)
                return
            self._monitored[spec.flow_id] = spec.monitored_params()
            self._pending.setdefault(spec.flow_id, set())
            for param, binding in spec.inputs.items():
                if binding.selector.is_latest:
                    self._deps.setdefault(binding.asset_id, set()).add((spec.flow_id, param))

    def remove_flow(self, flow_id: str) -> None:
        with self._lock:
            self._schedules.pop(flow_id, None)
            self._pending.pop(flow_id, None)
            self._rules.pop(flow_id, None)
            self._monitored.pop(flow_id, None)
            for watchers in self._deps.values():
                watchers.difference_update({w for w in watchers if w[0] == flow_id})
            if self._db is not None:
                with self._db.transaction() as cur:
                    cur.execute("DELETE FROM schedules WHERE flow_id = ?", (flow_id,))
                    cur.execute("DELETE FROM pending_updates WHERE flow_id = ?", (flow_id,))

    def load(self, flows: list[FlowSpec], now: datetime) -> None:
        """Rebuild in-memory state from registered flows plus any persisted
        schedules and pending sets."""
        with self._lock:
            persisted_schedules = {}
            persisted_pending: dict[str, set[str]] = {}
            if self._db is not None:
                for row in self._db.query("SELECT * FROM schedules"):
                    persisted_schedules[row["flow_id"]] = TimerSchedule(
                        flow_id=row["flow_id"],
                        interval_s=row["interval_s"],
                        anchor_at=parse_ts(row["anchor_at"]),
                        next_due=parse_ts(row["next_due"]),
                        last_fired=parse_ts(row["last_fired"]) if row["last_fired"] else None,
                    )
                for row in self._db.query("SELECT * FROM pending_updates"):
                    persisted_pending.setdefault(row["flow_id"], set()).add(row["param"])
            for spec in flows:
                self.install_flow(spec, now)
                if spec.flow_id in persisted_schedules:
                    self._schedules[spec.flow_id] = persisted_schedules[spec.flow_id]
                if spec.flow_id in persisted_pending:
                    monitored = self._monitored.get(spec.flow_id, set())
                    self._pending[spec.flow_id] = persisted_pending[spec.flow_id] & monitored

    # -- evaluation ----------------------------------------------------------------

    def tick(self, now: datetime) -> list[FlowDispatch]:
        """Fire every schedule due at ``now`` exactly once. Missed intervals
        coalesce: next_due advances to the first grid point after now."""
        dispatches = []
        with self._lock:
            for schedule in self._schedules.values():
                if schedule.next_due > now:
                    continue
                anchor = schedule.anchor_at
                elapsed = (now - anchor).total_seconds()
                # Consume the largest due grid point; never fall behind the
                # point that made the schedule due (float-boundary guard).
                k_due = round((schedule.next_due - anchor).total_seconds() / schedule.interval_s)
                k = max(math.floor(elapsed / schedule.interval_s), k_due)
                schedule.last_fired = anchor + timedelta(seconds=k * schedule.interval_s)
                schedule.next_due = anchor + timedelta(seconds=(k + 1) * schedule.interval_s)
                self._persist_schedule(schedule)
                dispatches.append(FlowDispatch(schedule.flow_id, "periodic"))
        return dispatches

    def on_commit(self, asset_id: str, version: int) -> list[FlowDispatch]:
        """Record the update against every dependent flow's pending set and
        dispatch the flows whose rules are now satisfied (clearing their
        sets atomically)."""
        if self._asset_exists is not None and not self._asset_exists(asset_id):
            raise UnknownAsset(asset_id)
        dispatches = []
        with self._lock:
            touched: list[str] = []
            for flow_id, param in sorted(self._deps.get(asset_id, ())):
                pending = self._pending.setdefault(flow_id, set())
                if param not in pending:
                    pending.add(param)
                    self._persist_pending_add(flow_id, param)
                if flow_id not in touched:
                    touched.append(flow_id)
            for flow_id in touched:
                rule = self._rules[flow_id]
                pending = self._pending[flow_id]
                if rule_satisfied(rule, pending, self._monitored[flow_id]):
                    pending.clear()
                    self._persist_pending_clear(flow_id)
                    dispatches.append(
                        FlowDispatch(flow_id, f"input-update:{asset_id}@{version}")
                    )
        return dispatches

    def pending_params(self, flow_id: str) -> set[str]:
        with self._lock:
            return set(self._pending.get(flow_id, set()))

    def schedule_of(self, flow_id: str) -> TimerSchedule | None:
        with self._lock:
            return self._schedules.get(flow_id)

    # -- persistence ----------------------------------------------------------------

    def _persist_schedule(self, schedule: TimerSchedule) -> None:
        if self._db is None:
            return
        with self._db.transaction() as cur:
            cur.execute(
                "INSERT INTO schedules (flow_id, interval_s, anchor_at, next_due, last_fired)"
                " VALUES (?, ?, ?, ?, ?)"
                " ON CONFLICT(flow_id) DO UPDATE SET next_due=excluded.next_due,"
                " last_fired=excluded.last_fired, interval_s=excluded.interval_s,"
                " anchor_at=excluded.anchor_at",
                (
                    schedule.flow_id,
                    schedule.interval_s,
                    isots(schedule.anchor_at),
                    isots(schedule.next_due),
                    isots(schedule.last_fired) if schedule.last_fired else None,
                ),
            )

    def _persist_pending_add(self, flow_id: str, param: str) -> None:
        if self._db is None:
            return
        with self._db.transaction() as cur:
            cur.execute(
                "INSERT OR IGNORE INTO pending_updates (flow_id, param) VALUES (?, ?)",
                (flow_id, param),
            )

    def _persist_pending_clear(self, flow_id: str) -> None:
        if self._db is None:
            return
        with self._db.transaction() as cur:
            cur.execute("DELETE FROM pending_updates WHERE flow_id = ?", (flow_id,))
