"""Prediction server: a seeded surrogate behind the line protocol.

Each connection is served by its own thread, one request at a time; the
ledger is shared and charged atomically, so concurrent clients can never
exceed the budget. A negative ``budget`` in responses means unlimited.
"""
from __future__ import annotations

import logging
import socketserver
import threading
import time

from .blackbox import (BudgetExhausted, LocalOracle, OracleError, PromptShapeError,
                       SurrogateModel)
from .remote import ProtocolError, decode_message, encode_message, require, require_floats

log = logging.getLogger(__name__)


class PredictionService:
    """Protocol logic, independent of the transport."""

    def __init__(self, model: SurrogateModel, budget: int | None = None):
        self.model = model
        self.oracle = LocalOracle(model, budget=budget)

    def handle_line(self, line: bytes) -> bytes:
        start = time.perf_counter()
        op = handle = "?"
        try:
            msg = decode_message(line)
            op = require(msg, "op", str)
            if op == "register":
                handle = require(msg, "handle", str)
                n_images = require(msg, "n_images", int)
                dim = require(msg, "dim", int)
                if n_images < 1 or dim < 1:
                    raise ProtocolError("fields 'n_images' and 'dim' must be positive")
                feats = require_floats(msg, "features", n_images * dim).reshape(n_images, dim)
                self.oracle.register_images(feats, handle=handle)
                reply = {"ok": True}
            elif op == "predict":
                handle = require(msg, "handle", str)
                k = require(msg, "k", int)
                rows = require(msg, "rows", int)
                cols = require(msg, "cols", int)
                if min(k, rows, cols) < 1:
                    raise ProtocolError("fields 'k', 'rows', 'cols' must be positive")
                prompts = require_floats(msg, "prompts", k * rows * cols).reshape(k, rows, cols)
                logits = self.oracle.predict(handle, prompts)
                ledger = self.oracle.ledger
                reply = {"ok": True, "logits": logits, "used": ledger.used,
                         "budget": -1 if ledger.budget is None else ledger.budget}
            else:
                raise ProtocolError(f"unknown op {op!r}")
        except BudgetExhausted as exc:
            reply = {"ok": False, "error": str(exc)}
        except (ProtocolError, PromptShapeError, OracleError, ValueError) as exc:
            reply = {"ok": False, "error": str(exc)}
        ledger = self.oracle.ledger
        log.info("op=%s handle=%s used=%d/%s ok=%s latency_ms=%.2f", op, handle, ledger.used,
                 ledger.budget if ledger.budget is not None else "inf", reply["ok"],
                 1e3 * (time.perf_counter() - start))
        return encode_message(reply)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        service: PredictionService = self.server.service
        for line in self.rfile:
            if not line.strip():
                continue
            self.wfile.write(service.handle_line(line))
            self.wfile.flush()


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def make_server(model: SurrogateModel, budget: int | None, host: str = "127.0.0.1",
                port: int = 0) -> socketserver.ThreadingTCPServer:
    server = _Server((host, port), _Handler)
    server.service = PredictionService(model, budget)
    return server


def start_background(model: SurrogateModel, budget: int | None, host: str = "127.0.0.1",
                     port: int = 0):
    """Start a server on a daemon thread; returns ``(server, (host, port))``."""
    server = make_server(model, budget, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, server.server_address[:2]


def serve(model: SurrogateModel, budget: int | None, listen: str) -> None:
    host, _, port = listen.rpartition(":")
    server = make_server(model, budget, host or "127.0.0.1", int(port))
    log.info("serving seed=%d dims=%s budget=%s on %s:%d", model.seed, model.dims,
             budget, *server.server_address[:2])
    try:
        server.serve_forever()
    finally:
        server.server_close()
