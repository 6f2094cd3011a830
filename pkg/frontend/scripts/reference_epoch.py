"""Reference run for the SDK conformance test.

Hosts a fresh storage + controller stack on ephemeral ports, executes the
scripted two-task epoch with the primary transport clients, and prints a
canonical JSON dump of everything granted, fetched, and written. The SDK
test runs the identical script through its own client and the two dumps
must match byte for byte.
"""

from __future__ import annotations

import argparse
import json
import sys

from flowline.client import StreamingBatchIterator
from flowline.servers import ControllerServer, StorageServer
from flowline.storage import PartitionMap, StorageUnit
from flowline.transport import (
    ControllerClient,
    ServiceClient,
    StorageClient,
    consumer_from_string,
    parse_endpoint,
)
from flowline.types import TaskSpec

ROLLOUT = TaskSpec("rollout", ("prompt",), ("response",))
TRAIN = TaskSpec("train", ("prompt", "response"))


def response_for(row: int, prompt: bytes) -> bytes:
    return f"resp/{row}/".encode() + prompt


def run_epoch(total_rows: int, micro_batch: int, units: int) -> dict:
    partition = PartitionMap(units)
    storage_servers = []
    endpoints = {}
    for unit_id in range(units):
        owned = [r for r in range(total_rows) if partition.unit_for(r) == unit_id]
        server = StorageServer(StorageUnit(unit_id, 1, owned)).start()
        storage_servers.append(server)
        endpoints[unit_id] = server.endpoint

    controller = ControllerServer([ROLLOUT, TRAIN], 1, total_rows, endpoints)
    controller.start()
    controller.register_with_storage()

    clients = []

    def storage_clients():
        built = {}
        for unit_id, endpoint in endpoints.items():
            client = StorageClient(*parse_endpoint(endpoint))
            clients.append(client)
            built[unit_id] = client
        return built

    try:
        service = ServiceClient(*parse_endpoint(controller.endpoint))
        clients.append(service)
        prompts = [f"prompt-{r}".encode() for r in range(total_rows)]
        service.put_prompts(prompts)

        dump = {
            "total_rows": total_rows,
            "micro_batch": micro_batch,
            "write_acks": [],
        }
        for task in (ROLLOUT, TRAIN):
            ctrl = ControllerClient(
                *parse_endpoint(controller.endpoint), task.name
            )
            clients.append(ctrl)
            iterator = StreamingBatchIterator(
                consumer_from_string(f"{task.name}/0"),
                ctrl,
                storage_clients(),
                micro_batch,
            )
            batches = []
            cells = {}
            while (batch := iterator.next_batch()) is not None:
                rows = list(batch.meta.rows)
                batches.append(rows)
                for row in rows:
                    for column in batch.meta.columns:
                        cells[f"{row}/{column}"] = batch.value(row, column).hex()
                if task is ROLLOUT:
                    values = [
                        response_for(row, batch.value(row, "prompt"))
                        for row in rows
                    ]
                    dump["write_acks"].append(
                        service.write_back(task.name, "response", rows, values)
                    )
            dump[task.name] = {"batches": batches, "cells": cells}
        return dump
    finally:
        for client in clients:
            client.close()
        for server in [*storage_servers, controller]:
            server.stop()


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--total-rows", type=int, default=16)
    parser.add_argument("--micro-batch", type=int, default=4)
    parser.add_argument("--units", type=int, default=2)
    args = parser.parse_args()
    dump = run_epoch(args.total_rows, args.micro_batch, args.units)
    json.dump(dump, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
