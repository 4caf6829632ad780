"""Commit, crash and restart one rank against an in-process cluster."""

import logging

import numpy as np

from icheck.client import icheck_init
from icheck.cluster import LocalCluster

MiB = 1024 * 1024


def main():
    logging.basicConfig(level=logging.WARNING)
    with LocalCluster({"n1": 1024 * MiB}) as cluster:
        state = np.arange(4 * MiB // 8, dtype=np.float64)
        s = icheck_init("tour", 0, 1, config=cluster.client_config(sync=True))
        s.add_adapt("state", state, state.size, state.itemsize)
        for step in range(3):
            state += 1.0
            stats = s.commit()
            print(f"step {step}: copy {stats.t_copy * 1e3:.1f} ms, blocked {stats.t_blocked * 1e3:.1f} ms")
        s.crash()

        state[:] = 0
        s = icheck_init("tour", 0, 1, config=cluster.client_config(launch_id=1))
        s.add_adapt("state", state, state.size, state.itemsize)
        print("restarted:", s.restart(), "first value", state[0])
        s.finalize()


if __name__ == "__main__":
    main()
