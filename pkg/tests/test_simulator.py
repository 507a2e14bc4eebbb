import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_input, random_net, random_weights
from tncraft import simulator as sim
from tncraft.corelet import CoreConfig, CoreGraph, InputPort, NeuronParams, OutputPort, Route, lower_network
from tncraft.netspec import parse_network
from tncraft.simulator import NeuronState, neuron_step
from tncraft.trainer import ModelWeights, forward


def _step(v, total, leak, threshold, reset=0):
    return neuron_step(NeuronState(v), [1], [total], NeuronParams(threshold, leak, reset))


@pytest.mark.parametrize("v,total,leak,threshold,fired,after", [
    (0, 10, 2, 5, True, 0),    # fires and resets
    (0, 3, 2, 5, False, 1),    # sub-threshold potential persists
    (4, 0, 0, 4, True, 0),     # V == threshold fires
    (5, 0, 1, 5, False, 4),    # leak comes before the threshold test
    (4, 1, 1, 5, False, 4),    # integrate then leak
    (-3, 0, -2, 0, False, -1), # negative leak raises the potential
    (7, 0, 0, 3, True, -2),    # reset to a non-zero value
])
def test_neuron_step_cases(v, total, leak, threshold, fired, after):
    reset = -2 if after == -2 else 0
    state, f = _step(v, total, leak, threshold, reset)
    assert f is fired
    assert state.potential == after


def test_neuron_step_masks_inactive_inputs():
    state, fired = neuron_step(NeuronState(0), [1, 0, 1, 0], [2, 100, 3, -100], NeuronParams(6, 0))
    assert not fired and state.potential == 5


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(-8, 8)), min_size=1, max_size=20))
def test_integration_is_linear_in_spike_counts(pairs):
    counts = [c for c, _ in pairs]
    weights = [w for _, w in pairs]
    far = NeuronParams(threshold=10**9, leak=0)
    once, _ = neuron_step(NeuronState(0), counts, weights, far)
    twice, _ = neuron_step(NeuronState(0), [2 * c for c in counts], weights, far)
    assert twice.potential == 2 * once.potential


def _passthrough_chain():
    a = CoreConfig.empty()
    a.axon_types[0] = 0
    a.crossbar[0, 0] = True
    a.add_neuron(NeuronParams(1, 0, 0, (1, -1, 0, 0)), Route(1, 7))
    b = CoreConfig.empty()
    b.crossbar[7, 0] = True
    b.add_neuron(NeuronParams(1, 0, 0, (1, -1, 0, 0)))
    return CoreGraph([a, b], [InputPort(0, 0, 0)], [OutputPort(1, 0, 0, 0)], 1, (1, 1, 1), 1)


def test_passthrough_timing():
    trace = sim.run(_passthrough_chain(), np.array([[1]]), ticks=4)
    assert [(e.tick, e.core, e.line) for e in trace.deliveries] == [(0, 0, 0), (1, 1, 7)]
    assert [(e.tick, e.core, e.line) for e in trace.emitted] == [(0, 0, 0), (1, 1, 0)]
    assert trace.output_counts.tolist() == [1]
    assert trace.dump() == "0 0 0 D\n0 0 0 E\n1 1 7 D\n1 1 0 E\n"


def test_empty_graph_gives_empty_trace():
    trace = sim.run(CoreGraph(), np.ones((3, 5), bool), ticks=3)
    assert trace.emitted == [] and trace.deliveries == []
    assert trace.dropped == 15


def test_unbound_input_spikes_are_counted():
    g = _passthrough_chain()
    g.num_inputs = 2
    trace = sim.run(g, np.array([[1, 1]]), ticks=2)
    assert trace.dropped == 1
    assert len(trace.emitted) == 2


def test_counts_equal_emission_events():
    g = _passthrough_chain()
    trace = sim.run(g, np.ones((5, 1), bool), ticks=6)
    out = [e for e in trace.emitted if (e.core, e.line) == (1, 0)]
    assert trace.output_counts[0] == len(out) == 5
    assert trace.emitted == sorted(trace.emitted)


def test_encode_binary():
    assert not sim.encode_binary(np.zeros((2, 3))).any()
    spikes = sim.encode_binary(np.array([1.0, 0.49, 0.5]))
    assert spikes.shape == (1, 3) and spikes[0].tolist() == [True, False, True]
    with pytest.raises(ValueError):
        sim.encode_binary(np.zeros((2, 2)), shape=(1, 2, 2))
    with pytest.raises(ValueError):
        sim.encode_binary(np.array([1.5]))


@pytest.mark.parametrize("v,count", [(0.0, 0), (1.0, 16), (0.5, 8), (0.25, 4)])
def test_encode_rate_counts(v, count):
    train = sim.encode_rate(np.array([v]), 16)[:, 0]
    assert train.sum() == count


def test_encode_rate_spacing():
    train = sim.encode_rate(np.array([0.5]), 16)[:, 0]
    assert np.flatnonzero(train).tolist() == list(range(0, 16, 2))
    three = np.flatnonzero(sim.encode_rate(np.array([3 / 16]), 16)[:, 0]).tolist()
    assert three == [0, 6, 11]


@settings(max_examples=200, deadline=None)
@given(v=st.floats(0, 1), ticks=st.integers(1, 128))
def test_rate_quantization_bound(v, ticks):
    n = int(sim.encode_rate(np.array([v]), ticks).sum())
    assert abs(n / ticks - v) <= 1 / (2 * ticks) + 1e-12


def test_encode_rate_stochastic_is_seeded():
    v = np.linspace(0, 1, 50)
    a = sim.encode_rate(v, 32, stochastic=True, seed=3)
    assert np.array_equal(a, sim.encode_rate(v, 32, stochastic=True, seed=3))
    assert not a[:, 0].any() and a[:, -1].all()
    with pytest.raises(ValueError):
        sim.encode_rate(np.array([-0.1]), 4)
    with pytest.raises(ValueError):
        sim.encode_rate(np.array([0.1]), 0)


def _graph_with_counts(counts):
    g = CoreGraph(num_classes=len(counts))
    g.output_ports = [OutputPort(0, i, i, i) for i in range(len(counts))]
    return g, sim.SimulationTrace(1, output_counts=np.array(counts))


@pytest.mark.parametrize("counts,label", [([5, 0, 0], 0), ([2, 2], 0), ([0, 1, 3], 2), ([0, 0], 0)])
def test_decode_classification(counts, label):
    g, trace = _graph_with_counts(counts)
    assert sim.decode_classification(trace, g) == label


def test_decode_needs_output_ports():
    with pytest.raises(ValueError):
        sim.decode_classification(sim.SimulationTrace(1), CoreGraph())


# --- oracle ---------------------------------------------------------------

AUDIT_NET = parse_network("I 4 4 1\nC1 2 2 1 1 1 3 3 1 - -\n")
AUDIT_X = np.array([[[1, 0, 1, 0],
                     [0, 1, 1, 0],
                     [1, 1, 0, 0],
                     [0, 0, 1, 1]]])
AUDIT_W = np.array([[[[1, -1, 0],
                      [0, 1, -1],
                      [1, 0, -1]]]])
# window sums worked by hand: [[2, 1], [-1, -1]]
AUDIT_OUT = np.array([[[1, 1], [0, 0]]])


def test_oracle_audited_sample():
    w = ModelWeights.from_trinary([AUDIT_W], 1)
    assert np.array_equal(sim.oracle_forward(AUDIT_NET, w, AUDIT_X)[0], AUDIT_OUT)


def test_oracle_identity_and_zero():
    net = parse_network("I 3 3 2\nC1 3 3 2 2 1 1 1 1 - -\n")
    x = np.random.default_rng(0).integers(0, 2, (2, 3, 3))
    ident = ModelWeights.from_trinary([np.ones((2, 1, 1, 1))], 2)
    zero = ModelWeights.from_trinary([np.zeros((2, 1, 1, 1))], 2)
    assert np.array_equal(sim.oracle_forward(net, ident, x)[0], x)
    assert not sim.oracle_forward(net, zero, x)[0].any()


def _simulate_layers(net, w, x):
    g = lower_network(net, w)
    trace = sim.run(g, sim.encode_binary(x), ticks=sim.ticks_needed(g) + 1)
    out = np.zeros(g.output_shape, np.int64).reshape(-1)
    out[[p.index for p in g.output_ports]] = trace.output_counts
    return g, trace, out.reshape(g.output_shape)


def test_audited_sample_through_chip():
    w = ModelWeights.from_trinary([AUDIT_W], 1)
    _, _, out = _simulate_layers(AUDIT_NET, w, AUDIT_X)
    assert np.array_equal(out, AUDIT_OUT)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_lowering_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    w = random_weights(rng, net)
    x = random_input(rng, net)
    expected = sim.oracle_forward(net, w, x)
    g, trace, out = _simulate_layers(net, w, x)
    assert np.array_equal(out, expected[-1])
    assert sim.decode_classification(trace, g) == sim.oracle_predict(net, w, x)
    fp = forward(net, w, (x[None].astype(np.float32), None), "eval")
    for a, b in zip(fp.activations, expected):
        assert np.array_equal(a[0], b)


def test_batch_engine_matches_single_runs():
    rng = np.random.default_rng(5)
    net = random_net(rng)
    w = random_weights(rng, net)
    g = lower_network(net, w)
    engine = sim.Engine(g)
    xs = [random_input(rng, net) for _ in range(7)]
    spikes = np.stack([sim.encode_binary(x) for x in xs], axis=2)
    batch = sim.classify_batch(engine, spikes, 8, chunk=3)
    threaded = sim.classify_batch(engine, spikes, 8, chunk=2, workers=3)
    single = [sim.decode_classification(sim.run(g, sim.encode_binary(x), 8, engine), g) for x in xs]
    assert batch.tolist() == single == threaded.tolist()


def test_trace_dump_is_deterministic():
    rng = np.random.default_rng(11)
    net = random_net(rng)
    w = random_weights(rng, net)
    x = random_input(rng, net)
    dumps = {sim.run(lower_network(net, w), sim.encode_rate(x, 8), 8).dump() for _ in range(2)}
    assert len(dumps) == 1


def test_ticks_needed_counts_splitter_stage():
    w = ModelWeights.from_trinary([np.ones((1, 1, 3, 3))], 1)
    g = lower_network(parse_network("I 4 4 1\nC1 2 2 1 1 1 3 3 1 - -\n"), w)
    assert sim.ticks_needed(g) == 2
    assert sim.ticks_needed(_passthrough_chain()) == 2
