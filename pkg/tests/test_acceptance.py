"""Acceptance gate. Each test prints one ``ACCEPT`` line and asserts it.

The scenario criteria share one cache of full-length runs, so the module
takes a few minutes; every other test in the suite is fast.
"""

import hashlib
import random
import statistics
import time
from fractions import Fraction
from functools import lru_cache

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbra import cli
from fbra.controller import bounce_back, undershoot
from fbra.fec import FecBlockState, encode_block, try_recover
from fbra.metrics import run_summary
from fbra.netsim.scenario import default_scenario, run
from fbra.owd import OwdHistory, correlate, percentile
from fbra.trace import is_rtp_flow, is_tcp_flow
from fbra.types import MediaPacket, seq_add

from . import oracles
from .test_controller import all_cases, check_against_table

SEEDS = range(1, 11)
DELAY_CAP_US = 400_000
RESULTS = []


def report(criterion, ok, detail):
    line = f"ACCEPT {criterion:<3} {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# --- per-run checks ----------------------------------------------------------


def delay_violations(trace):
    """Played or recovered packets whose end-to-end delay exceeds the cap."""
    sent_at = {}
    bad = 0
    for e in trace.events:
        if not is_rtp_flow(e.flow):
            continue
        if e.kind == "SEND_RTP":
            sent_at[(e.flow, e.seq)] = e.time
        elif e.kind in ("RECV", "RECOVERED"):
            if e.time - sent_at[(e.flow, e.seq)] > DELAY_CAP_US:
                bad += 1
    return bad


def fec_outside_probe(trace):
    state = {}
    bad = 0
    for e in trace.events:
        if e.kind == "STATE" and is_rtp_flow(e.flow):
            state[e.flow] = e.extra
        elif e.kind == "SEND_FEC" and state.get(e.flow) != "PROBE":
            bad += 1
    return bad


def tcp_progress(trace):
    """Every started transfer has finished, except at most a last one still running."""
    problems = []
    for flow in trace.flows():
        if not is_tcp_flow(flow):
            continue
        on = [e.seq for e in trace.of_flow(flow) if e.kind == "STATE" and e.extra == "on"]
        off = [e.seq for e in trace.of_flow(flow) if e.kind == "STATE" and e.extra == "off"]
        if not on:
            problems.append(f"{flow} never started")
        elif off != on[: len(off)] or len(on) - len(off) > 1:
            problems.append(f"{flow} stalled transfer")
        elif not off:
            problems.append(f"{flow} completed nothing")
    return problems


@lru_cache(maxsize=None)
def scenario_run(topology, delay_ms, seed):
    started = time.perf_counter()
    trace = run(default_scenario(topology, delay_ms, seed=seed))
    elapsed = time.perf_counter() - started
    return {
        "summary": run_summary(trace),
        "seconds": elapsed,
        "delay_violations": delay_violations(trace),
        "fec_outside_probe": fec_outside_probe(trace),
        "tcp_problems": tcp_progress(trace),
    }


def sweep(topology, delay_ms):
    return [scenario_run(topology, delay_ms, s) for s in SEEDS]


def mean_of(runs, flow, key):
    return statistics.fmean(r["summary"]["flows"][flow][key] for r in runs)


ALL_RUNS = [("single_var_link", 50), ("single_var_link", 100), ("single_var_link", 240),
            ("rtp_vs_tcp", 50), ("multi_rtp_vs_tcp", 50)]


# --- 1: decision table -------------------------------------------------------


def test_c1_state_machine_matches_decision_table():
    started = time.perf_counter()
    n = mismatches = 0
    for state, cue in all_cases():
        n += 1
        mismatches += bool(check_against_table(state, cue))
    elapsed = time.perf_counter() - started
    report("1", mismatches == 0 and elapsed < 1.0,
           f"{n} cases, {mismatches} mismatches, {elapsed:.2f} s")


# --- 2: FEC round trip -------------------------------------------------------


def test_c2_fec_round_trip():
    rng = random.Random(2024)
    started = time.perf_counter()
    single_ok = double_claimed = 0
    blocks = 10_000
    for _ in range(blocks):
        n = rng.randint(2, 14)
        base = rng.randrange(65536)
        pkts = [MediaPacket(7, seq_add(base, i), rng.randbytes(rng.randint(1, 1472)))
                for i in range(n)]
        fec = encode_block(pkts)
        lost = rng.randrange(n)
        state = FecBlockState.for_fec(fec, 1)
        for i, p in enumerate(pkts):
            if i != lost:
                state.add(p)
        single_ok += try_recover(state, 0) == pkts[lost]

        a, b = rng.sample(range(n), 2)
        state = FecBlockState.for_fec(fec, 1)
        for i, p in enumerate(pkts):
            if i not in (a, b):
                state.add(p)
        double_claimed += try_recover(state, 0) is not None
    elapsed = time.perf_counter() - started
    report("2", single_ok == blocks and double_claimed == 0 and elapsed < 10.0,
           f"{single_ok}/{blocks} single erasures exact, {double_claimed} double claimed, "
           f"{elapsed:.1f} s")


# --- 3: percentiles and correlation ------------------------------------------


def test_c3_percentile_and_correlation_oracle():
    rng = random.Random(3)
    mismatches = 0
    covariance_failures = 0
    for _ in range(1000):
        samples = [rng.randint(1, 1_000_000) for _ in range(rng.randint(1, 20))]
        current = rng.randint(0, 1_000_000)
        p40 = oracles.nearest_rank(samples, Fraction(2, 5))
        p80 = oracles.nearest_rank(samples, Fraction(4, 5))
        mismatches += percentile(samples, 0.4) != p40 or percentile(samples, 0.8) != p80
        corr = correlate(OwdHistory(samples=samples), current)
        mismatches += corr.corr_low != current / p40 or corr.corr_high != current / p80
        for k in (2, 10, 1000):
            scaled = correlate(OwdHistory(samples=[k * s for s in samples]), k * current)
            covariance_failures += (
                scaled.corr_low != pytest.approx(corr.corr_low, rel=1e-12)
                or scaled.corr_high != pytest.approx(corr.corr_high, rel=1e-12)
            )
    report("3", mismatches == 0 and covariance_failures == 0,
           f"1000 histories, {mismatches} oracle mismatches, "
           f"{covariance_failures} scale failures for k in (2, 10, 1000)")


# --- 4: undershoot and bounce-back -------------------------------------------

UNDERSHOOT_FAILURES = []


@settings(max_examples=2000, deadline=None)
@given(st.integers(min_value=32_000, max_value=20_000_000), st.data())
def _undershoot_property(sr, data):
    gp = data.draw(st.integers(min_value=0, max_value=sr))
    exact = Fraction(9, 10) * (2 * gp - sr)
    expected = max(32_000, min(int(exact // 1), sr))
    if undershoot(sr, gp) != expected:
        UNDERSHOOT_FAILURES.append(("undershoot", sr, gp))
    stored = data.draw(st.integers(min_value=0, max_value=20_000_000))
    if bounce_back(stored, True) != max(32_000, int(Fraction(9, 10) * stored // 1)):
        UNDERSHOOT_FAILURES.append(("bounce", stored))


def test_c4_undershoot_and_bounce_back_arithmetic():
    UNDERSHOOT_FAILURES.clear()
    _undershoot_property()
    edges = [(sr, gp) for sr in (32_000, 100_000, 1_000_001) for gp in (0, sr // 2, sr - 1, sr)]
    for sr, gp in edges:
        if undershoot(sr, gp) != oracles.undershoot_oracle(sr, gp):
            UNDERSHOOT_FAILURES.append(("edge", sr, gp))
    report("4", not UNDERSHOOT_FAILURES,
           f"2000 random + {len(edges)} edge cases, {len(UNDERSHOOT_FAILURES)} failures")


# --- 5: scenario bands -------------------------------------------------------


@pytest.mark.slow
def test_c5a_single_flow_variable_link():
    runs = sweep("single_var_link", 50)
    goodput = mean_of(runs, "rtp0", "goodput") / 1000
    loss = mean_of(runs, "rtp0", "loss_rate")
    frcc = statistics.fmean(r["summary"]["frcc"] for r in runs)
    slowest = max(r["seconds"] for r in runs)
    ok = 110 <= goodput <= 230 and loss < 0.05 and frcc > 0.75 and slowest < 30
    report("5a", ok, f"goodput {goodput:.1f} kbps, loss {100 * loss:.2f}%, "
                     f"FRCC {frcc:.3f}, slowest run {slowest:.1f} s")


@pytest.mark.slow
def test_c5b_delay_ordering():
    g100 = mean_of(sweep("single_var_link", 100), "rtp0", "goodput") / 1000
    g240 = mean_of(sweep("single_var_link", 240), "rtp0", "goodput") / 1000
    report("5b", g240 < g100, f"goodput {g240:.1f} kbps at 240 ms vs {g100:.1f} kbps at 100 ms")


@pytest.mark.slow
def test_c5c_one_rtp_against_ten_tcp():
    runs = sweep("rtp_vs_tcp", 50)
    loss = mean_of(runs, "rtp0", "loss_rate")
    tfs = statistics.fmean(r["summary"]["tfs"] for r in runs)
    stalled = [p for r in runs for p in r["tcp_problems"]]
    slowest = max(r["seconds"] for r in runs)
    ok = loss < 0.05 and 0.5 <= tfs <= 1.7 and not stalled and slowest < 30
    report("5c", ok, f"RTP loss {100 * loss:.2f}%, TFS {tfs:.3f}, "
                     f"{len(stalled)} TCP progress problems, slowest run {slowest:.1f} s")


@pytest.mark.slow
def test_c5d_two_rtp_flows_share_fairly():
    runs = sweep("multi_rtp_vs_tcp", 50)
    g0 = mean_of(runs, "rtp0", "goodput") / 1000
    g1 = mean_of(runs, "rtp1", "goodput") / 1000
    gap = abs(g0 - g1) / ((g0 + g1) / 2)
    report("5d", gap < 0.35, f"rtp0 {g0:.1f} kbps, rtp1 {g1:.1f} kbps, gap {100 * gap:.1f}%")


# --- 6-8: trace invariants ---------------------------------------------------


@pytest.mark.slow
def test_c6_delay_cap_never_exceeded():
    runs = [r for topo, delay in ALL_RUNS for r in sweep(topo, delay)]
    bad = sum(r["delay_violations"] for r in runs)
    report("6", bad == 0, f"{len(runs)} runs, {bad} played packets over 400 ms")


def test_c7_deterministic_traces(tmp_path):
    digests = {}
    for topo in ("single_var_link", "rtp_vs_tcp", "multi_rtp_vs_tcp"):
        conf = tmp_path / f"{topo}.conf"
        conf.write_text(f"topology = {topo}\nbottleneck_delay_ms = 50\nduration_s = 60\n"
                        "seed = 5\n")
        for attempt in ("a", "b"):
            out = tmp_path / f"{topo}_{attempt}"
            assert cli.main(["run", "--scenario", str(conf), "--out", str(out), "-q"]) == 0
            digests.setdefault(topo, set()).add(
                hashlib.sha256((out / "trace.csv").read_bytes()).hexdigest())
    differing = [t for t, d in digests.items() if len(d) != 1]
    report("7", not differing, f"3 families, {len(differing)} with differing trace hashes")


@pytest.mark.slow
def test_c8_fec_only_while_probing():
    runs = [r for topo, delay in ALL_RUNS for r in sweep(topo, delay)]
    bad = sum(r["fec_outside_probe"] for r in runs)
    report("8", bad == 0, f"{len(runs)} runs, {bad} FEC packets sent outside PROBE")
