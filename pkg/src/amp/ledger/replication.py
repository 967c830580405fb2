"""Deterministic replicated-commit simulation for the ledger.

A fixed leader ships entries to followers with Raft-style AppendEntries
(previous index/term consistency check, conflict truncation, majority
commit restricted to the current term). The network is a tick-driven
scheduler with seeded drops, delays and partitions. Leader election is
not simulated; :meth:`ReplicaHarness.failover` installs the most
up-to-date replica of a connected majority as the new leader.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

from ..errors import InvalidArgument

NOOP = ("noop",)  # a new leader's first entry, so earlier-term entries can commit


@dataclass
class Replica:
    node_id: int
    log: list = field(default_factory=list)  # (term, entry) pairs
    term: int = 0
    commit_index: int = 0  # number of committed entries
    crashed: bool = False

    def last_term(self) -> int:
        return self.log[-1][0] if self.log else 0

    def committed(self) -> list:
        return [e for _, e in self.log[: self.commit_index] if e[:1] != NOOP]


@dataclass(frozen=True)
class _Partition:
    start: int
    end: Optional[int]
    groups: tuple  # tuple of frozensets; nodes in different groups cannot talk


@dataclass(frozen=True)
class _Failover:
    tick: int
    crash_old: bool


@dataclass
class CommitTrace:
    committed: list  # entries in commit order (leader's committed log)
    commit_ticks: dict  # log position -> tick at which the leader committed it
    messages_sent: int
    messages_delivered: int
    messages_dropped: int
    ticks: int
    stalled: bool
    stall_reason: str
    replica_logs: dict  # node id -> committed entries
    commit_history: dict  # node id -> commit index sampled each tick it changed
    leaders: list  # (tick, node id, term)

    @property
    def commit_count(self) -> int:
        return len(self.committed)

    def divergent_indices(self) -> list:
        """Log positions at which two replicas committed different entries."""
        bad = []
        logs = list(self.replica_logs.values())
        longest = max((len(x) for x in logs), default=0)
        for i in range(longest):
            seen = {repr(x[i]) for x in logs if len(x) > i}
            if len(seen) > 1:
                bad.append(i)
        return bad

    def regressions(self) -> list:
        """Nodes whose commit index ever went backwards."""
        return [n for n, hist in self.commit_history.items() if any(b < a for a, b in zip(hist, hist[1:]))]

    def signature(self) -> tuple:
        """Hashable digest of everything seed-dependent, for determinism checks."""
        return (
            tuple(repr(e) for e in self.committed),
            tuple(sorted(self.commit_ticks.items())),
            self.messages_sent,
            self.messages_delivered,
            self.messages_dropped,
            self.ticks,
            self.stalled,
        )


class ReplicaHarness:
    def __init__(
        self,
        n: int,
        *,
        drop_rate: float = 0.0,
        min_delay: int = 1,
        max_delay: int = 1,
        batch: int = 16,
        leader: int = 0,
    ):
        if n < 3 or n % 2 == 0:
            raise InvalidArgument(f"replica count must be odd and >= 3, got {n}")
        if not 0.0 <= drop_rate < 1.0:
            raise InvalidArgument("drop_rate must be in [0, 1)")
        if not 1 <= min_delay <= max_delay:
            raise InvalidArgument("need 1 <= min_delay <= max_delay")
        self.n = n
        self.drop_rate = drop_rate
        self.min_delay = min_delay
        self.max_delay = max_delay
        self.batch = batch
        self.initial_leader = leader
        self._partitions: list = []
        self._failovers: list = []

    @property
    def majority(self) -> int:
        return self.n // 2 + 1

    def partition(self, *groups: Sequence[int], start: int = 0, end: Optional[int] = None) -> "ReplicaHarness":
        """Split the network into ``groups`` during ticks [start, end); unlisted nodes form one more group."""
        listed = set().union(*map(set, groups)) if groups else set()
        rest = frozenset(range(self.n)) - listed
        parts = tuple(frozenset(g) for g in groups) + ((rest,) if rest else ())
        self._partitions.append(_Partition(start, end, parts))
        return self

    def isolate(self, *nodes: int, start: int = 0, end: Optional[int] = None) -> "ReplicaHarness":
        """Cut each listed node off from everyone else."""
        return self.partition(*[[x] for x in nodes], start=start, end=end)

    def failover(self, tick: int, crash_old: bool = True) -> "ReplicaHarness":
        self._failovers.append(_Failover(tick, crash_old))
        return self

    def connected(self, a: int, b: int, tick: int) -> bool:
        for p in self._partitions:
            if p.start <= tick and (p.end is None or tick < p.end):
                if not any(a in g and b in g for g in p.groups):
                    return False
        return True


def run_replicated(
    harness: ReplicaHarness, workload: Sequence[Hashable], seed: int, *, max_ticks: int = 2000
) -> CommitTrace:
    """Drive ``workload`` (distinct hashable entries) through the harness; same seed, same trace."""
    rng = random.Random(seed)
    n = harness.n
    replicas = [Replica(i) for i in range(n)]
    leader = harness.initial_leader
    term = 1
    for r in replicas:
        r.term = term
    leaders = [(0, leader, term)]
    pending = list(workload)  # not yet in the current leader's log
    next_index = [0] * n
    match_index = [0] * n
    queue: list = []
    seq = 0
    sent = delivered = dropped = 0
    commit_ticks: dict = {}
    history = {i: [0] for i in range(n)}
    failovers = sorted(harness._failovers, key=lambda f: f.tick)
    stall_reason = ""
    leaderless = False

    def reset_leader_state():
        for i in range(n):
            next_index[i] = len(replicas[leader].log)
            match_index[i] = 0
        match_index[leader] = len(replicas[leader].log)

    reset_leader_state()

    def send(src, dst, msg, tick):
        nonlocal seq, sent, dropped
        sent += 1
        if replicas[src].crashed or not harness.connected(src, dst, tick) or rng.random() < harness.drop_rate:
            dropped += 1
            return
        delay = rng.randint(harness.min_delay, harness.max_delay)
        heapq.heappush(queue, (tick + delay, seq, src, dst, msg))
        seq += 1

    tick = 0
    workload_len = len(workload)
    while tick < max_ticks:
        # failover injection
        while failovers and failovers[0].tick <= tick:
            fo = failovers.pop(0)
            if fo.crash_old:
                replicas[leader].crashed = True
            alive = [i for i in range(n) if not replicas[i].crashed]
            best = None
            for cand in alive:
                group = [j for j in alive if harness.connected(cand, j, tick)]
                if len(group) >= harness.majority:
                    key = (replicas[cand].last_term(), len(replicas[cand].log), -cand)
                    if best is None or key > best[0]:
                        best = (key, cand)
            if best is None:
                # retry next tick; the cluster is leaderless until a majority can talk
                failovers.insert(0, _Failover(tick + 1, False))
                leaderless = True
                stall_reason = f"failover at tick {fo.tick}: no connected majority to elect from"
                break
            leaderless = False
            leader = best[1]
            term += 1
            replicas[leader].term = term
            leaders.append((tick, leader, term))
            have = {e for _, e in replicas[leader].log}
            pending = [e for e in workload if e not in have]
            replicas[leader].log.append((term, NOOP + (term,)))
            reset_leader_state()
        if leaderless:
            tick += 1
            continue

        lead = replicas[leader]
        # propose: one batch of new client entries per tick
        take, pending = pending[: harness.batch], pending[harness.batch :]
        for e in take:
            lead.log.append((term, e))
        match_index[leader] = len(lead.log)

        # replicate
        for f in range(n):
            if f == leader:
                continue
            start = next_index[f]
            prev_term = lead.log[start - 1][0] if start > 0 else 0
            msg = ("append", term, start, prev_term, tuple(lead.log[start : start + harness.batch * 4]),
                   lead.commit_index)
            send(leader, f, msg, tick)

        # deliver everything due this tick
        while queue and queue[0][0] <= tick:
            _, _, src, dst, msg = heapq.heappop(queue)
            node = replicas[dst]
            if node.crashed:
                dropped += 1
                continue
            delivered += 1
            if msg[0] == "append":
                _, mterm, prev_idx, prev_term, entries, leader_commit = msg
                if mterm < node.term:
                    send(dst, src, ("reply", node.term, False, 0), tick)
                    continue
                node.term = mterm
                if prev_idx > len(node.log) or (prev_idx > 0 and node.log[prev_idx - 1][0] != prev_term):
                    send(dst, src, ("reply", mterm, False, min(prev_idx, len(node.log))), tick)
                    continue
                for k, item in enumerate(entries):
                    pos = prev_idx + k
                    if pos < len(node.log):
                        if node.log[pos][0] != item[0]:
                            del node.log[pos:]
                            node.log.append(item)
                    else:
                        node.log.append(item)
                last_new = prev_idx + len(entries)
                new_commit = min(leader_commit, last_new)
                if new_commit > node.commit_index:
                    node.commit_index = new_commit
                    history[dst].append(new_commit)
                send(dst, src, ("reply", mterm, True, last_new), tick)
            else:
                _, rterm, ok, idx = msg
                if src == leader or dst != leader or rterm != term:
                    continue
                if ok:
                    match_index[src] = max(match_index[src], idx)
                    next_index[src] = max(next_index[src], idx)
                else:
                    next_index[src] = max(0, min(next_index[src] - 1, idx))

        # advance the leader's commit index (only entries from the current term count directly)
        for cand in range(len(lead.log), lead.commit_index, -1):
            votes = sum(1 for i in range(n) if match_index[i] >= cand)
            if votes >= harness.majority and lead.log[cand - 1][0] == term:
                for pos in range(lead.commit_index, cand):
                    commit_ticks[pos] = tick
                lead.commit_index = cand
                history[leader].append(cand)
                break

        tick += 1
        done = not pending and lead.commit_index >= len(lead.log)
        followers_caught_up = all(
            replicas[i].commit_index == lead.commit_index for i in range(n)
            if not replicas[i].crashed and harness.connected(leader, i, tick)
        )
        if done and followers_caught_up and not failovers:
            break

    lead = replicas[leader]
    complete = len(lead.committed()) >= workload_len and not leaderless
    if not complete and not stall_reason:
        stall_reason = (
            f"committed {len(lead.committed())}/{workload_len} entries after {tick} ticks; "
            f"leader {leader} could not reach a majority of {harness.majority}"
        )
    return CommitTrace(
        committed=lead.committed(),
        commit_ticks=commit_ticks,
        messages_sent=sent,
        messages_delivered=delivered,
        messages_dropped=dropped,
        ticks=tick,
        stalled=not complete,
        stall_reason="" if complete else stall_reason,
        replica_logs={r.node_id: r.committed() for r in replicas},
        commit_history=history,
        leaders=leaders,
    )
