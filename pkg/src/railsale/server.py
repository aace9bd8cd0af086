"""HTTP/1.1 JSON front end for :class:`~railsale.engine.Engine`, and a small client.

Requests are served by a bounded thread pool; a keep-alive connection holds
one worker until it closes or idles out. Sessions travel as
``Authorization: Bearer <token>``.

Endpoints::

    POST /auth/register                 {username, password, id_number, phone}
    GET  /auth/username-available       ?username=
    POST /auth/login                    {username, password}
    GET  /trains/query                  ?date=&departure=&arrival=
    POST /tickets/dedup-token
    POST /tickets/purchase              {dedup, train_id, service_date, departure,
                                         arrival, seat_type, passengers, preference}
    POST /orders/{order_no}/cancel
    POST /pay/{order_no}
    POST /pay/callback                  {order_no, result, callback_id}
    GET  /orders/by-passenger/{id_number}
    GET  /metrics
    GET  /health

Errors come back as ``{"error": {"code", "message", "retryable"}}`` with the
status from :data:`railsale.engine.ERROR_CODES`.
"""
from __future__ import annotations

import http.client
import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, HTTPServer
from urllib.parse import parse_qs, quote, unquote, urlsplit

from .engine import ApiError, Engine, RequestContext, api_error

log = logging.getLogger(__name__)

IDLE_TIMEOUT_S = 5.0
MAX_BODY = 1 << 20

_CANCEL = re.compile(r"^/orders/([^/]+)/cancel$")
_PAY = re.compile(r"^/pay/([^/]+)$")
_BY_PASSENGER = re.compile(r"^/orders/by-passenger/([^/]+)$")


def _query_param(query: dict, name: str) -> str:
    values = query.get(name)
    if not values or not values[0]:
        raise api_error("bad_request", f"missing query parameter {name!r}")
    return values[0]


def dispatch(engine: Engine, method: str, path: str, query: dict, body: dict, ctx: RequestContext):
    """Route one request to the engine; returns the JSON-able result."""
    if method == "GET":
        if path == "/health":
            return {"status": "ok"}
        if path == "/metrics":
            return engine.metrics()
        if path == "/trains/query":
            return {
                "trains": engine.query_trains(
                    _query_param(query, "date"), _query_param(query, "departure"), _query_param(query, "arrival"), ctx
                )
            }
        if path == "/auth/username-available":
            return {"available": engine.username_available(_query_param(query, "username"), ctx)}
        m = _BY_PASSENGER.match(path)
        if m:
            return {"orders": engine.orders_by_passenger(unquote(m.group(1)), ctx)}
    elif method == "POST":
        if path == "/auth/login":
            return engine.login(str(body.get("username", "")), str(body.get("password", "")), ctx)
        if path == "/auth/register":
            return engine.register(
                str(body.get("username", "")),
                str(body.get("password", "")),
                str(body.get("id_number", "")),
                str(body.get("phone", "")),
                ctx,
            )
        if path == "/tickets/dedup-token":
            return {"dedup": engine.issue_dedup_token(ctx)}
        if path == "/tickets/purchase":
            return engine.purchase(body, ctx)
        if path == "/pay/callback":
            return engine.payment_callback(body, ctx)
        m = _CANCEL.match(path)
        if m:
            return engine.cancel(unquote(m.group(1)), ctx)
        m = _PAY.match(path)
        if m:
            return engine.pay(unquote(m.group(1)), ctx)
    raise api_error("not_found", f"no route for {method} {path}")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    disable_nagle_algorithm = True  # headers and body go out in separate writes
    timeout = IDLE_TIMEOUT_S
    server: "EngineServer"

    def log_message(self, format: str, *args) -> None:  # noqa: A002 - stdlib signature
        log.debug("%s " + format, self.address_string(), *args)

    def _send(self, status: int, payload: object) -> None:
        data = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        if self.server.draining:
            self.send_header("Connection", "close")
            self.close_connection = True
        self.end_headers()
        self.wfile.write(data)

    def _handle(self, method: str) -> None:
        url = urlsplit(self.path)
        try:
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY:
                raise api_error("bad_request", "body too large")
            raw = self.rfile.read(length) if length else b""
            try:
                body = json.loads(raw) if raw else {}
            except (json.JSONDecodeError, UnicodeDecodeError):
                raise api_error("bad_request", "body is not valid JSON") from None
            if not isinstance(body, dict):
                raise api_error("bad_request", "body must be a JSON object")
            auth = self.headers.get("Authorization") or ""
            token = auth[7:] if auth.startswith("Bearer ") else None
            ctx = RequestContext(auth_token=token, ip=self.client_address[0], path=url.path)
            result = dispatch(self.server.engine, method, url.path, parse_qs(url.query), body, ctx)
            self._send(200, result)
        except ApiError as exc:
            self._send(exc.status, {"error": exc.to_dict()})
        except Exception:
            log.exception("unhandled error on %s %s", method, url.path)
            self._send(500, {"error": api_error("internal", "internal error").to_dict()})

    def do_GET(self) -> None:
        self._handle("GET")

    def do_POST(self) -> None:
        self._handle("POST")


class EngineServer(HTTPServer):
    """HTTPServer whose connections run on a fixed-size pool."""

    daemon_threads = True
    request_queue_size = 1024

    def __init__(self, engine: Engine, host: str = "127.0.0.1", port: int = 0, workers: int = 256):
        super().__init__((host, port), _Handler)
        self.engine = engine
        self.draining = False
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="http")
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def process_request(self, request, client_address) -> None:
        self._pool.submit(self._work, request, client_address)

    def _work(self, request, client_address) -> None:
        try:
            self.finish_request(request, client_address)
        except Exception:
            self.handle_error(request, client_address)
        finally:
            self.shutdown_request(request)

    def start(self) -> "EngineServer":
        self.engine.start()
        self._thread = threading.Thread(target=self.serve_forever, name="http-accept", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        """Stop accepting, let in-flight requests finish, then stop the engine."""
        self.draining = True
        self.shutdown()
        if self._thread is not None:
            self._thread.join()
        self._pool.shutdown(wait=True)
        self.server_close()
        self.engine.stop()

    def __enter__(self) -> "EngineServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


@dataclass
class Response:
    status: int
    body: dict
    bytes_in: int
    bytes_out: int

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300

    @property
    def error_code(self) -> str | None:
        err = self.body.get("error") if isinstance(self.body, dict) else None
        return err.get("code") if err else None


class ApiClient:
    """Keep-alive JSON client for one connection; not thread-safe."""

    def __init__(self, base_url: str, timeout_s: float = 30.0):
        parts = urlsplit(base_url)
        self.host = parts.hostname or "127.0.0.1"
        self.port = parts.port or 80
        self.timeout_s = timeout_s
        self.token: str | None = None
        self._conn: http.client.HTTPConnection | None = None

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def request(self, method: str, path: str, body: dict | None = None) -> Response:
        data = json.dumps(body).encode("utf-8") if body is not None else b""
        headers = {"Content-Type": "application/json", "Content-Length": str(len(data))}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        for attempt in (0, 1):
            if self._conn is None:
                self._conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout_s)
            try:
                self._conn.request(method, path, body=data, headers=headers)
                resp = self._conn.getresponse()
                raw = resp.read()
                break
            except (http.client.RemoteDisconnected, BrokenPipeError, ConnectionResetError):
                # server closed an idle keep-alive connection; reconnect once
                self.close()
                if attempt:
                    raise
        if resp.getheader("Connection", "").lower() == "close":
            self.close()
        sent = len(data) + len(method) + len(path) + sum(len(k) + len(v) + 4 for k, v in headers.items())
        received = len(raw) + sum(len(k) + len(v) + 4 for k, v in resp.getheaders())
        return Response(resp.status, json.loads(raw) if raw else {}, received, sent)

    # convenience wrappers

    def register(self, username: str, password: str, id_number: str, phone: str) -> Response:
        return self.request(
            "POST",
            "/auth/register",
            {"username": username, "password": password, "id_number": id_number, "phone": phone},
        )

    def login(self, username: str, password: str) -> Response:
        resp = self.request("POST", "/auth/login", {"username": username, "password": password})
        if resp.ok:
            self.token = resp.body["token"]
        return resp

    def query(self, date: str, departure: str, arrival: str) -> Response:
        return self.request(
            "GET", f"/trains/query?date={quote(date)}&departure={quote(departure)}&arrival={quote(arrival)}"
        )

    def dedup_token(self) -> Response:
        return self.request("POST", "/tickets/dedup-token")

    def purchase(self, request: dict) -> Response:
        return self.request("POST", "/tickets/purchase", request)

    def cancel(self, order_no: str) -> Response:
        return self.request("POST", f"/orders/{quote(order_no)}/cancel")

    def pay(self, order_no: str) -> Response:
        return self.request("POST", f"/pay/{quote(order_no)}")

    def metrics(self) -> Response:
        return self.request("GET", "/metrics")
