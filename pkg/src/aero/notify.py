"""Terminal-failure notification with pluggable sinks.

Two sinks ship: ``log`` (default) and ``webhook`` (HTTP POST of a JSON
body). Delivery is attempted exactly once per terminal run; sink failures
are recorded, never retried, so a broken webhook can't loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import datetime

import httpx

from .db import Database
from .model import FlowRun, FlowSpec, isots, new_id, parse_ts, utcnow

log = logging.getLogger(__name__)


@dataclass
class NotificationRecord:
    notification_id: str
    run_id: str
    flow_id: str
    status: str
    sink: str
    target: str
    message: str
    created_at: datetime
    delivered: bool


class Notifier:
    def __init__(
        self,
        db: Database,
        webhook_url: str | None = None,
        http: httpx.Client | None = None,
    ):
        self._db = db
        self.webhook_url = webhook_url
        self._http = http or httpx.Client(timeout=5.0)

    @property
    def sink(self) -> str:
        return "webhook" if self.webhook_url else "log"

    def notify_terminal(self, flow: FlowSpec, run: FlowRun, error_message: str) -> NotificationRecord:
        """Dispatch exactly one notification for a failed run to the flow's
        contact via the configured sink; the delivery record is durable."""
        body = {
            "flow_id": flow.flow_id,
            "run_id": run.run_id,
            "status": run.status.value,
            "error_message": error_message,
            "timestamp": isots(utcnow()),
        }
        delivered = True
        if self.webhook_url:
            try:
                response = self._http.post(self.webhook_url, json=body)
                delivered = response.status_code < 400
            except httpx.HTTPError as exc:
                log.error("notifier webhook failed for run %s: %s", run.run_id, exc)
                delivered = False
        else:
            log.error(
                "flow %s run %s failed (%s): %s [contact: %s]",
                flow.flow_id, run.run_id, run.status.value, error_message, flow.contact,
            )
        record = NotificationRecord(
            notification_id=new_id(),
            run_id=run.run_id,
            flow_id=flow.flow_id,
            status=run.status.value,
            sink=self.sink,
            target=self.webhook_url or flow.contact,
            message=error_message,
            created_at=utcnow(),
            delivered=delivered,
        )
        with self._db.transaction() as cur:
            cur.execute(
                "INSERT INTO notifications (notification_id, run_id, flow_id, status, sink,"
                " target, message, created_at, delivered) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    record.notification_id,
                    record.run_id,
                    record.flow_id,
                    record.status,
                    record.sink,
                    record.target,
                    record.message,
                    isots(record.created_at),
                    int(record.delivered),
                ),
            )
        return record

    def close(self) -> None:
        self._http.close()

    def records_for_flow(self, flow_id: str) -> list[NotificationRecord]:
        rows = self._db.query(
            "SELECT * FROM notifications WHERE flow_id = ? ORDER BY created_at", (flow_id,)
        )
        return [
            NotificationRecord(
                notification_id=r["notification_id"],
                run_id=r["run_id"],
                flow_id=r["flow_id"],
                status=r["status"],
                sink=r["sink"],
                target=r["target"],
                message=r["message"],
                created_at=parse_ts(r["created_at"]),
                delivered=bool(r["delivered"]),
            )
            for r in rows
        ]
