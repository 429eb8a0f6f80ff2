import numpy as np
import pytest

from dumpy.build import build_structure
from dumpy.config import IndexConfig
from dumpy.series import paa, prepare
from dumpy.storage import FLAG_DUPLICATE
from dumpy.tree import pack_isax, pack_leaves

from conftest import audit, random_walks, structure_key


def set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def demotion(group, lam):
    return sum(len({(s >> (lam - 1 - j)) & 1 for s in group}) > 1 for j in range(lam))


class TestPackLeaves:
    SIZES = {0b0000: 60, 0b0001: 30, 0b1111: 50, 0b1110: 40}

    def test_reference_grouping(self):
        packs = pack_leaves(self.SIZES, 4, 0.5, 100)
        assert sorted(packs) == [[0b0000, 0b0001], [0b1110, 0b1111]]
        assert [demotion(p, 4) for p in sorted(packs)] == [1, 1]

    def test_reference_grouping_is_optimal(self):
        valid = [p for p in set_partitions(list(self.SIZES))
                 if all(sum(self.SIZES[s] for s in g) <= 100 and demotion(g, 4) <= 2 for g in p)]
        fewest = min(len(p) for p in valid)
        best = [sorted(sorted(g) for g in p) for p in valid if len(p) == fewest]
        assert sorted(pack_leaves(self.SIZES, 4, 0.5, 100)) in best
        assert demotion([0b0000, 0b1111], 4) == 4

    def test_everything_fits(self):
        packs = pack_leaves({0: 10, 1: 20, 2: 5, 3: 1}, 2, 1.0, 100)
        assert packs == [[0, 1, 2, 3]]

    def test_rho_zero_keeps_leaves(self):
        sizes = {s: 3 for s in range(8)}
        assert sorted(pack_leaves(sizes, 3, 0.0, 100)) == [[s] for s in range(8)]

    def test_large_children_ignored(self):
        assert pack_leaves({0: 200, 1: 5}, 1, 1.0, 100) == [[1]]

    @pytest.mark.parametrize("seed", range(20))
    def test_constraints_hold(self, seed):
        r = np.random.default_rng(seed)
        lam = int(r.integers(1, 7))
        sids = r.choice(1 << lam, int(r.integers(1, 1 << lam)) if lam > 1 else 2, replace=False)
        sizes = {int(s): int(r.integers(1, 60)) for s in sids}
        rho = float(r.choice([0.0, 0.25, 0.5, 1.0]))
        packs = pack_leaves(sizes, lam, rho, 100)
        assert sorted(s for p in packs for s in p) == sorted(sizes)
        for p in packs:
            assert sum(sizes[s] for s in p) <= 100
            assert demotion(p, lam) <= int(rho * lam + 1e-9)

    def test_pack_isax(self):
        codes, depths, demoted = pack_isax([1, 0, 0], [1, 0, 2], (0, 2), [0b00, 0b01], 3)
        assert demoted == 1
        assert codes.tolist() == [2, 0, 0] and depths.tolist() == [2, 0, 2]


class TestBuild:
    def test_small_corpus_invariants(self, small_corpus):
        index, ds, _ = small_corpus
        prim = audit(index, ds)
        assert sorted(prim) == list(range(ds.count))
        assert index.root.csl == tuple(range(8))
        assert sum(p.count for p in index.packs()) == ds.count

    def test_children_extend_parent_by_one_bit(self, small_corpus):
        index, _, _ = small_corpus
        for nd in index.internals():
            for cid in index.children(nd.id):
                ch = index.nodes[cid]
                grow = ch.depths.astype(int) - nd.depths.astype(int)
                assert set(np.flatnonzero(grow > 0)) <= set(nd.csl)
                assert np.all(grow >= 0) and np.all(grow <= 1)
                if not ch.is_leaf:
                    assert np.all(grow[list(nd.csl)] == 1)
            assert set(nd.routing) <= set(range(1 << len(nd.csl)))

    def test_dataset_below_threshold(self, make_index, rng):
        index, ds = make_index(random_walks(rng, 150, 32), n=32, w=4, th=200)
        assert all(p.parent == 0 for p in index.packs())
        assert len(index.packs()) <= 16
        assert sorted(audit(index, ds)) == list(range(150))

    def test_identical_series_oversized(self, make_index, rng):
        X = np.tile(rng.standard_normal(32), (80, 1))
        index, ds = make_index(X, n=32, w=4, th=10)
        assert len(index.root.routing) == 1
        packs = index.packs()
        assert len(packs) == 1 and packs[0].oversized and packs[0].count == 80

    def test_empty_dataset(self, make_index):
        index, _ = make_index(np.zeros((0, 16)), n=16, w=4, th=5)
        assert index.root.is_leaf and index.root.count == 0

    def test_deterministic(self, make_index, rng):
        X = random_walks(rng, 3000, 64)
        a, _ = make_index(X, n=64, w=8, th=50)
        b, _ = make_index(X, n=64, w=8, th=50)
        assert structure_key(a) == structure_key(b)

    def test_structure_only_from_sax(self, rng):
        sax = rng.integers(0, 256, (2000, 4)).astype(np.uint8)
        nodes = build_structure(sax, IndexConfig(n=16, w=4, th=40))
        packs = [nd for nd in nodes if nd.is_leaf]
        assert sum(p.size for p in packs) == 2000

    @pytest.mark.slow
    def test_full_membership_1e5(self, tmp_path):
        from dumpy.build import build_index
        from dumpy.sax_stage import gen_random_walk
        ds = gen_random_walk(100000, 256, 21, tmp_path / "db.bin")
        index = build_index(ds, IndexConfig(th=100), tmp_path / "idx")
        prim = []
        for p in index.packs():
            prim.extend(index.read_pack(p)[:p.count]["ordinal"].tolist())
        assert len(prim) == 100000 and len(set(prim)) == 100000
        assert all(p.count <= 100 or p.oversized for p in index.packs())


class TestFuzzy:
    def test_tiny_f_no_duplicates(self, make_index, rng):
        index, _ = make_index(random_walks(rng, 2000, 64), n=64, w=8, th=50, fuzzy=1e-9)
        flags = np.concatenate([index.read_pack(p)[:p.count]["flags"] for p in index.packs()])
        assert not (flags & FLAG_DUPLICATE).any()

    def test_breakpoint_series_duplicated(self, make_index):
        on_bp = np.array([1, -1, 1, -1, 1, 1, 1, 1, -1, -1, -1, -1, 1, -1, 1, -1], float)
        partner = np.array([-1] * 4 + [1] * 4 + [-1] * 4 + [1] * 4, float)
        index, _ = make_index(np.stack([on_bp, partner]), n=16, w=4, th=10, rho=0.0, fuzzy=0.3)
        homes = index.locations()[0]
        assert len(homes) == 2
        assert homes[0][0] != homes[1][0]

    def test_audit_1e4(self, make_index):
        rng = np.random.default_rng(99)
        X = random_walks(rng, 10000, 64)
        index, ds = make_index(X, n=64, w=8, th=100, fuzzy=0.3)
        plain, _ = make_index(X, n=64, w=8, th=100)
        P = paa(prepare(X), 8)
        assert index.fuzzy_log, "expected some duplicates"
        for o, pid, seg, bp, half in index.fuzzy_log:
            assert abs(P[o, seg] - bp) < half
            assert 0 < half
        copies = {}
        for p in index.packs():
            assert p.count <= 100 or p.oversized
            for o in index.read_pack(p)[:p.count]["ordinal"]:
                copies[int(o)] = copies.get(int(o), 0) + 1
        assert max(copies.values()) <= 3 and len(copies) == 10000
        # duplicates never change node words
        for a, b in zip(index.nodes, plain.nodes):
            assert np.array_equal(a.codes, b.codes) and np.array_equal(a.depths, b.depths)
        assert sorted(audit(index, ds)) == list(range(10000))
