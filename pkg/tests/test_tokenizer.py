import io
import random

import numpy as np
import pytest

from assetformer import asset_model as am
from assetformer import tokenizer as tk
from assetformer.pcg import TOY_PARAMS, PcgParams, generate_pcg, make_record


def P(c, r, x):
    return am.Primitive(c, r, x)


# --- schedule ------------------------------------------------------------------


@pytest.mark.parametrize("pos,t", [(0, tk.TokenType.CLASS), (1, tk.TokenType.ROTATION), (4, tk.TokenType.X2),
                                   (5, tk.TokenType.CLASS), (17, tk.TokenType.X0)])
def test_token_type_at(pos, t):
    assert tk.token_type_at(pos) is t


def test_valid_sets():
    assert tk.valid_token_set(tk.TokenType.ROTATION) == list(range(25, 29))
    assert tk.valid_token_set(tk.TokenType.CLASS) == list(range(25)) + [213]
    assert tk.valid_token_set(tk.TokenType.X2) == list(range(132, 213))
    assert tk.valid_token_set(tk.TokenType.X0) == list(range(29, 88))
    assert tk.valid_token_set(tk.TokenType.X1) == list(range(88, 132))


def test_segments_partition_vocabulary():
    seen = []
    for t in list(tk.TokenType)[:5]:
        seen.extend(tk.segment(t))
    assert sorted(seen) == list(range(213))
    assert tk.VALID_MASKS[:5].sum() == 214
    assert list(np.flatnonzero(tk.VALID_MASKS[tk.TokenType.EOS])) == [213]
    for tok in range(214):
        t = tk.token_type_of_id(tok)
        assert tk.VALID_MASKS[t, tok]


# --- ordering ------------------------------------------------------------------


def test_two_chain_dfs():
    a = am.Asset((P(8, 0, (1, 0, 0)), P(8, 0, (0, 0, 0))))
    assert tk.reorder(a, "dfs", seed=0) == [1, 0]
    b = am.Asset((P(8, 0, (0, 0, 0)), P(8, 0, (1, 0, 0))))
    assert tk.reorder(b, "dfs", seed=0) == [0, 1]


def test_raw_is_identity_and_seed_free():
    a = generate_pcg(PcgParams(), 0)
    assert tk.reorder(a, "raw", seed=1) == tk.reorder(a, "raw", seed=2) == list(range(len(a)))


def test_path_graph_bfs_equals_dfs():
    a = am.Asset((P(8, 0, (2, 0, 0)), P(8, 0, (0, 0, 0)), P(8, 0, (1, 0, 0))))
    assert tk.reorder(a, "bfs", seed=3) == tk.reorder(a, "dfs", seed=3) == [1, 2, 0]


def test_start_is_lower_corner_height_first():
    # (x1, x0, x2) ordering: the lowest layer wins even with a larger x0
    a = am.Asset((P(8, 0, (0, 1, 0)), P(8, 0, (1, 0, 0))))
    assert tk.reorder(a, "dfs")[0] == 1


def test_components_visited_by_corner():
    a = am.Asset((P(8, 0, (10, 0, 0)), P(8, 0, (11, 0, 0)), P(8, 0, (0, 0, 0)), P(8, 0, (0, 1, 0))))
    assert tk.reorder(a, "dfs") == [2, 3, 0, 1]
    assert tk.reorder(a, "bfs") == [2, 3, 0, 1]


def test_dfs_goes_deep_bfs_goes_wide():
    # star centre 0 with a tail 1 -> 4 and a leaf 2
    a = am.Asset((P(8, 0, (5, 0, 5)), P(8, 0, (6, 0, 5)), P(8, 0, (4, 0, 5)), P(8, 0, (7, 0, 5)),
                  P(8, 0, (8, 0, 5))))
    # corner is index 2 at x0=4; the chain is 2-0-1-3-4 so both agree
    assert tk.reorder(a, "dfs") == tk.reorder(a, "bfs") == [2, 0, 1, 3, 4]
    b = am.Asset((P(8, 0, (0, 0, 0)), P(8, 0, (1, 0, 0)), P(8, 0, (0, 0, 2)), P(8, 0, (2, 0, 0)),
                  P(8, 0, (0, 0, 1))))
    # graph: 0-1, 0-4, 1-3, 4-2 (1 and 4 are diagonal neighbours too)
    dfs = tk.reorder(b, "dfs")
    bfs = tk.reorder(b, "bfs")
    assert bfs[:3] == [0, 1, 4]
    assert sorted(dfs) == sorted(bfs) == list(range(5))


def test_seeded_orderings_reproducible_and_varied():
    a = generate_pcg(PcgParams(), 4)
    for m in ("dfs", "bfs", "random"):
        assert tk.reorder(a, m, seed=5) == tk.reorder(a, m, seed=5)
        assert len({tuple(tk.reorder(a, m, seed=s)) for s in range(5)}) > 1


def test_random_order_is_a_permutation():
    a = generate_pcg(PcgParams(), 4)
    assert sorted(tk.reorder(a, "random", seed=0)) == list(range(len(a)))


def assert_local(asset, tau):
    g = am.build_adjacency(asset)
    seen = {tau[0]}
    for u in tau[1:]:
        assert any(v in seen for v in g.neighbors[u])
        seen.add(u)


@pytest.mark.parametrize("method", ["dfs", "bfs"])
def test_ordering_locality(method):
    for seed in range(60):
        a = generate_pcg(PcgParams(), seed)
        assert_local(a, tk.reorder(a, method, seed=seed))


# --- tokenize / detokenize -----------------------------------------------------


def test_offset_arithmetic():
    a = am.Asset((P(3, 2, (10, 5, 20)),))
    assert tk.tokenize(a, [0]) == [3, 27, 39, 93, 152, 213]
    assert tk.detokenize([3, 27, 39, 93, 152, 213]) == a


def test_length_is_five_n_plus_one():
    a = am.Asset((P(3, 2, (10, 5, 20)), P(8, 0, (0, 0, 0))))
    assert len(tk.tokenize(a, [1, 0])) == 11


def test_empty_asset():
    assert tk.tokenize(am.Asset(()), []) == [213]
    assert tk.detokenize([213]) == am.Asset(())


def test_extreme_coordinates_roundtrip():
    a = am.Asset((P(24, 3, (58, 43, 80)), P(0, 0, (0, 0, 0))))
    assert tk.detokenize(tk.tokenize(a)) == a


def test_tokenize_rejects_non_permutation():
    a = am.Asset((P(3, 2, (10, 5, 20)), P(8, 0, (0, 0, 0))))
    with pytest.raises(ValueError):
        tk.tokenize(a, [0, 0])


@pytest.mark.parametrize(
    "tokens,pos",
    [([3, 3, 39, 93, 152, 213], 1),            # class id in rotation slot
     ([3, 27, 39, 213], 3),                     # EOS mid-tuple
     ([3, 27, 39, 93, 152], 5),                 # missing EOS
     ([213, 3], 1),                             # tokens after EOS
     ([3, 27, 39, 93, 30, 213], 4),             # x0 id in x2 slot
     ([214], 0), ([-1], 0)],
)
def test_schedule_errors(tokens, pos):
    with pytest.raises(tk.TokenScheduleError) as info:
        tk.detokenize(tokens)
    assert info.value.position == pos


def test_prefix_schedule():
    tk.check_schedule([3, 27, 39, 93, 152], terminated=False)
    tk.check_schedule([], terminated=False)
    with pytest.raises(tk.TokenScheduleError):
        tk.check_schedule([3, 27, 39], terminated=False)
    with pytest.raises(tk.TokenScheduleError):
        tk.check_schedule([213], terminated=False)


@pytest.mark.parametrize("method", list(tk.OrderingMethod))
def test_roundtrip_matches_reordered_asset(method):
    for seed in range(25):
        a = generate_pcg(PcgParams(), seed)
        tau = tk.reorder(a, method, seed=seed)
        back = tk.detokenize(tk.tokenize(a, tau))
        assert back.primitives == a.reordered(tau).primitives
        assert back.multiset() == a.multiset()


def test_roundtrip_random_assets():
    rng = random.Random(0)
    for _ in range(30):
        n = rng.randrange(1, 80)
        prims = tuple(P(rng.randrange(25), rng.randrange(4),
                        (rng.randrange(59), rng.randrange(44), rng.randrange(81))) for _ in range(n))
        a = am.Asset(prims)
        for m in tk.OrderingMethod:
            tau = tk.reorder(a, m, seed=1)
            assert tk.detokenize(tk.tokenize(a, tau)).multiset() == a.multiset()


# --- binary dataset file -------------------------------------------------------


def toy_dataset(n=6, method="dfs"):
    recs = [make_record(TOY_PARAMS, 0, i) for i in range(n)]
    return recs, tk.prepare(recs, method, seed=0)


def test_prepare_roundtrip_and_determinism():
    recs, ds = toy_dataset()
    assert ds == toy_dataset()[1]
    for rec, tr in zip(recs, ds.records):
        assert tk.detokenize(tr.tokens).multiset() == rec.asset.multiset()
        assert len(tr.condition) == 4
    assert ds.max_seq_len == max(len(r.tokens) for r in ds.records)


def test_prepare_record_independent_of_neighbours():
    recs, ds = toy_dataset()
    sub = tk.prepare(recs[:3], "dfs", seed=0)
    assert sub.records == ds.records[:3]


def test_tokfile_roundtrip(tmp_path):
    _, ds = toy_dataset()
    path = tmp_path / "d.tok"
    tk.write_tokenized(ds, path)
    assert tk.read_tokenized(path) == ds


def test_tokfile_truncated():
    _, ds = toy_dataset()
    buf = io.BytesIO()
    tk.write_tokenized(ds, buf)
    data = buf.getvalue()
    for cut in (10, len(data) - 1):
        with pytest.raises(tk.TokenFileError, match="truncated"):
            tk.read_tokenized(io.BytesIO(data[:cut]))


def test_tokfile_bad_magic_and_version():
    _, ds = toy_dataset(2)
    buf = io.BytesIO()
    tk.write_tokenized(ds, buf)
    data = bytearray(buf.getvalue())
    with pytest.raises(tk.TokenFileError, match="magic"):
        tk.read_tokenized(io.BytesIO(b"XXXX" + bytes(data[4:])))
    data[4] = 9
    with pytest.raises(tk.TokenFileError, match="version"):
        tk.read_tokenized(io.BytesIO(bytes(data)))
