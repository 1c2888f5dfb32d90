"""In-process fleet: coordinator plus client nodes over queue channels.

Same protocol code as the TCP deployment, different channel flavor; results
are transport-independent because ring sums are exact and training seeds are
derived from the request, not the transport.
"""

from __future__ import annotations

from typing import Optional, Sequence

from .clientnode import ClientNode
from .coordinator import Coordinator, ServiceConfig
from .datasim import read_manifest
from .features import DataRecord, read_csv
from .transport import queue_pair


class LocalFleet:
    """Coordinator with N in-process clients, wired and started in one call."""

    def __init__(
        self,
        shards: Sequence[list[DataRecord]],
        config: Optional[ServiceConfig] = None,
        coordinator: Optional[Coordinator] = None,
    ) -> None:
        self.coordinator = coordinator if coordinator is not None else Coordinator(config)
        self.nodes: list[ClientNode] = []
        for cid, records in enumerate(shards):
            coord_end, client_end = queue_pair()
            self.coordinator.attach(coord_end)
            self.nodes.append(ClientNode(cid, records, client_end))

    def start(self, timeout: float = 10.0) -> "LocalFleet":
        for node in self.nodes:
            node.start()
        self.wait_ready(timeout)
        return self

    def wait_ready(self, timeout: float) -> None:
        import time

        deadline = time.monotonic() + timeout
        want = len(self.nodes)
        while time.monotonic() < deadline:
            connected = sum(1 for c in self.coordinator.list_clients() if c["connected"])
            if connected == want:
                return
            time.sleep(0.01)
        raise TimeoutError(f"only {connected}/{want} clients registered in {timeout}s")

    def stop(self) -> None:
        for node in self.nodes:
            node.stop()
        self.coordinator.stop()

    def __enter__(self) -> "LocalFleet":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def load_shards(manifest_path: str) -> list[list[DataRecord]]:
    shards_by_id = read_manifest(manifest_path)
    shards = []
    for cid in sorted(shards_by_id):
        records, skipped = read_csv(str(shards_by_id[cid]))
        if skipped:
            import logging

            logging.getLogger("fedviz.sim").warning(
                "client %d: skipped %d malformed rows", cid, skipped
            )
        shards.append(records)
    return shards


def fleet_from_manifest(
    manifest_path: str,
    config: Optional[ServiceConfig] = None,
    coordinator: Optional[Coordinator] = None,
) -> LocalFleet:
    return LocalFleet(load_shards(manifest_path), config, coordinator)
