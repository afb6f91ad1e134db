"""Newline-delimited JSON wire protocol and a client oracle that speaks it.

Requests::

    {"op":"register","handle":str,"n_images":int,"dim":int,"features":[float...]}
    {"op":"predict","handle":str,"k":int,"rows":int,"cols":int,"prompts":[float...]}

Responses are ``{"ok":true,...}`` or ``{"ok":false,"error":str}``, one JSON
object per line. Floats go out with 17 significant digits, which round-trips
IEEE doubles exactly. Arrays are flattened row-major.
"""
from __future__ import annotations

import json
import socket

import numpy as np

from .blackbox import BlackBoxOracle, BudgetExhausted, OracleError, QueryLedger

BUDGET_MESSAGE = "query budget exhausted"


class ProtocolError(OracleError):
    pass


class TransportError(OracleError):
    """Connection-level failure; the request may be retried."""


class RemoteError(OracleError):
    """The server answered ``ok: false`` with a non-budget error."""


def format_floats(values) -> str:
    flat = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(flat)):
        raise ProtocolError("cannot serialize non-finite floats")
    return "[" + ",".join(format(float(v), ".17g") for v in flat) + "]"


def encode_message(fields: dict) -> bytes:
    """Serialize one message; numpy arrays become 17-digit float lists."""
    parts = []
    for key, value in fields.items():
        if isinstance(value, np.ndarray):
            text = format_floats(value)
        else:
            text = json.dumps(value)
        parts.append(f"{json.dumps(key)}:{text}")
    return ("{" + ",".join(parts) + "}\n").encode("utf-8")


def decode_message(line: bytes | str) -> dict:
    try:
        obj = json.loads(line)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed JSON line: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("message must be a JSON object")
    return obj


def require(obj: dict, name: str, kind):
    if name not in obj:
        raise ProtocolError(f"missing field {name!r}")
    value = obj[name]
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is bool:
        ok = isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ProtocolError(f"field {name!r} has wrong type {type(value).__name__}")
    return value


def require_floats(obj: dict, name: str, count: int) -> np.ndarray:
    values = require(obj, name, list)
    if len(values) != count:
        raise ProtocolError(f"field {name!r} has {len(values)} values, expected {count}")
    try:
        arr = np.array(values, dtype=np.float64)
    except (TypeError, ValueError):
        raise ProtocolError(f"field {name!r} must contain only numbers") from None
    if arr.shape != (count,) or not np.all(np.isfinite(arr)):
        raise ProtocolError(f"field {name!r} must contain only finite numbers")
    return arr


class RemoteOracle(BlackBoxOracle):
    """Client for a prediction server. One request in flight at a time.

    ``ledger`` mirrors the server's counters as reported in each predict
    response.
    """

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.host, self.port = host, int(port)
        self.timeout = timeout
        self.ledger = QueryLedger(None)
        self._sock: socket.socket | None = None
        self._file = None

    def _connect(self):
        if self._sock is not None:
            return
        try:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except OSError as exc:
            raise TransportError(f"cannot reach {self.host}:{self.port}: {exc}") from None
        self._file = self._sock.makefile("rwb")

    def close(self):
        if self._file is not None:
            try:
                self._file.close()
            except OSError:
                pass
        if self._sock is not None:
            self._sock.close()
        self._sock = self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _roundtrip(self, fields: dict) -> dict:
        self._connect()
        try:
            self._file.write(encode_message(fields))
            self._file.flush()
            line = self._file.readline()
        except OSError as exc:
            self.close()
            raise TransportError(f"connection failed: {exc}") from None
        if not line:
            self.close()
            raise TransportError("server closed the connection")
        reply = decode_message(line)
        ok = require(reply, "ok", bool)
        if not ok:
            error = require(reply, "error", str)
            if error == BUDGET_MESSAGE:
                raise BudgetExhausted(error)
            raise RemoteError(error)
        return reply

    def register_images(self, features, handle: str | None = None) -> str:
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] == 0:
            raise ValueError("feature matrix must be non-empty and 2-D")
        if handle is None:
            handle = f"images-{id(f):x}-{f.shape[0]}"
        self._roundtrip({"op": "register", "handle": handle, "n_images": f.shape[0],
                         "dim": f.shape[1], "features": f})
        return handle

    def predict(self, handle: str, prompts) -> np.ndarray:
        p = np.asarray(prompts, dtype=np.float64)
        if p.ndim != 3:
            raise ValueError(f"prompts must be (K, rows, cols), got shape {p.shape}")
        k, rows, cols = p.shape
        reply = self._roundtrip({"op": "predict", "handle": handle, "k": k,
                                 "rows": rows, "cols": cols, "prompts": p})
        used = require(reply, "used", int)
        budget = require(reply, "budget", int)
        logits = require(reply, "logits", list)
        if len(logits) % k:
            raise ProtocolError(f"field 'logits' has {len(logits)} values, not a multiple of k={k}")
        values = require_floats(reply, "logits", len(logits))
        self.ledger.sync(used, budget if budget >= 0 else None)
        return values.reshape(-1, k)
