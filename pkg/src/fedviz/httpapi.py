"""HTTP surface consumed by the web dashboard and the CLI.

    POST /api/query                         run a query, return the result
    GET  /api/sessions/{id}/progress        server-sent events: round reports,
                                            then one terminal result/error event
    GET  /api/clients                       roster with connection state
    GET  /api/charts/presets                ready-made chart configurations
"""

from __future__ import annotations

import json
import queue
import time
from typing import Iterator

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, StreamingResponse
from fastapi.staticfiles import StaticFiles

from .coordinator import Coordinator, QueryRequest, SessionAborted, TooFewClients, UnknownSession
from .presets import chart_presets


def build_app(coordinator: Coordinator, static_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="fedviz coordinator")

    @app.post("/api/query")
    def post_query(body: dict) -> JSONResponse:
        try:
            request = QueryRequest.from_dict(body)
        except (KeyError, ValueError, TypeError) as e:
            raise HTTPException(status_code=422, detail=f"bad query request: {e}")
        try:
            result = coordinator.handle_query(request)
        except TooFewClients as e:
            raise HTTPException(status_code=409, detail=str(e))
        except SessionAborted as e:
            raise HTTPException(status_code=502, detail=str(e))
        return JSONResponse(result.to_dict())

    @app.get("/api/sessions/{session_id}/progress")
    def progress(session_id: str, wait_s: float = 10.0) -> StreamingResponse:
        def events() -> Iterator[str]:
            # the session may not exist yet if the UI connects before POSTing
            deadline = time.monotonic() + wait_s
            while True:
                try:
                    past, live = coordinator.subscribe(session_id)
                    break
                except UnknownSession:
                    if time.monotonic() >= deadline:
                        yield _sse("error", {"reason": f"unknown session {session_id}"})
                        return
                    time.sleep(0.05)
            for report in past:
                yield _sse("report", report)
            while True:
                try:
                    event, payload = live.get(timeout=120.0)
                except queue.Empty:
                    yield _sse("error", {"reason": "progress stream timed out"})
                    return
                yield _sse(event, payload)
                if event in ("result", "error"):
                    return

        return StreamingResponse(events(), media_type="text/event-stream")

    @app.get("/api/clients")
    def clients() -> JSONResponse:
        return JSONResponse({"clients": coordinator.list_clients()})

    @app.get("/api/charts/presets")
    def presets() -> JSONResponse:
        return JSONResponse(chart_presets())

    if static_dir is not None:
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app


def _sse(event: str, payload: dict) -> str:
    return f"event: {event}\ndata: {json.dumps(payload, sort_keys=True)}\n\n"


def serve(app: FastAPI, host: str, port: int):
    """Run uvicorn in a background thread; returns (server, bound_port)."""
    import threading

    import uvicorn

    config = uvicorn.Config(app, host=host, port=port, log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 15
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("HTTP server failed to start")
        time.sleep(0.02)
    bound = server.servers[0].sockets[0].getsockname()[1]
    return server, bound
