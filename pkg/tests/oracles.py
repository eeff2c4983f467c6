"""Reference models used to derive expected values independently of the library."""

import random

GENERIC_VALUES = [b"<v>alpha</v>\n", b"<v>beta</v>\n", b"<v>gamma</v>\n"]


def trigger_reference(initial: dict, writes, ticks, period_ms: int):
    """Plain simulation of the hybrid trigger over abstract configuration dicts.

    ``writes`` is a list of ``(time_ms, file, content)``; a write at time w is
    observed as a change event at the first tick >= w. Returns emission times.
    """
    config = dict(initial)
    last_time = None
    last_config = None
    emitted = []
    pending = sorted(writes, key=lambda w: w[0])
    i = 0
    for t in ticks:
        event = False
        while i < len(pending) and pending[i][0] <= t:
            _, f, content = pending[i]
            config[f] = content
            event = True
            i += 1
        periodic = last_time is None or t - last_time >= period_ms
        if (periodic or event) and config != last_config:
            emitted.append(t)
            last_time, last_config = t, dict(config)
    return emitted


def random_timeline(rng: random.Random, files, horizon_ms: int, tick_ms: int, max_writes: int = 12):
    n = rng.randint(0, max_writes)
    writes = []
    for _ in range(n):
        t = rng.randint(1, horizon_ms - 1)
        writes.append((t, rng.choice(files), rng.choice(GENERIC_VALUES)))
    writes.sort(key=lambda w: w[0])
    ticks = list(range(0, horizon_ms + 1, tick_ms))
    return writes, ticks


def drive_reporter(reporter, snapshot, writes, ticks):
    """Feed a reporter the same timeline; returns emission tick times."""
    emitted = []
    i = 0
    for t in ticks:
        event = None
        while i < len(writes) and writes[i][0] <= t:
            _, f, content = writes[i]
            event = snapshot.apply_update(f, content)
            i += 1
        if reporter.tick(t, event) is not None:
            emitted.append(t)
    return emitted
