import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jetrep import jetdata as jd


def toy_rng(seed=0):
    return np.random.default_rng(seed)


def random_jet(seed=0, label=jd.ClassLabel.QCD):
    return jd.generate_toy_jet(label, toy_rng(seed))


def massless(pt, y, phi, flag=jd.CHARGED_HADRON):
    return jd.Particle(pt * np.cos(phi), pt * np.sin(phi),
                       pt * np.sinh(y), pt * np.cosh(y), flag)


class TestKinematics:
    def test_massless_transverse(self):
        pt, y, phi, m = jd.kinematics(jd.Particle(3.0, 4.0, 0.0, 5.0))
        assert pt == 5.0 and y == 0.0 and abs(m) < 1e-12

    def test_at_rest(self):
        pt, y, phi, m = jd.kinematics(jd.Particle(0.0, 0.0, 0.0, 1.0))
        assert pt == 0.0 and m == 1.0 and phi == 0.0

    def test_general_particle(self):
        # frozen from an independent 4-vector script
        pt, y, phi, m = jd.kinematics(jd.Particle(1.0, 1.0, 2.0, 3.0))
        assert abs(pt - 1.414213562373095) < 1e-12
        assert abs(y - 0.804718956217050) < 1e-12
        assert abs(m - 1.732050807568877) < 1e-12

    def test_rapidity_clamp_flags_event(self):
        jd.KINEMATIC_CLAMPS.reset()
        pt, y, phi, m = jd.kinematics(jd.Particle(0.1, 0.0, 2.0, 1.0))
        assert np.isfinite(y)
        assert jd.KINEMATIC_CLAMPS.count == 1
        jd.KINEMATIC_CLAMPS.reset()


class TestNormalizeJet:
    def make_jet(self, target_pt):
        jet = random_jet(3)
        return jd.Jet(jet.momenta * (target_pt / jet.pt()), jet.type_flags, jet.label)

    def test_pt_1000_halves(self):
        jet = self.make_jet(1000.0)
        out = jd.normalize_jet(jet)
        assert np.allclose(out.momenta, jet.momenta * 0.5)
        assert abs(out.pt() - 500.0) / 500.0 < 1e-9

    def test_pt_500_identity(self):
        jet = self.make_jet(500.0)
        out = jd.normalize_jet(jet)
        assert np.allclose(out.momenta, jet.momenta, rtol=1e-12)

    def test_two_particle_masses_scale_dr_fixed(self):
        a = massless(120.0, 0.1, 0.2).momentum()
        b = massless(180.0, -0.3, 0.25).momentum()
        a[3] = np.sqrt(np.sum(a[:3] ** 2) + 1.5 ** 2)
        b[3] = np.sqrt(np.sum(b[:3] ** 2) + 0.7 ** 2)
        jet = jd.Jet(np.stack([a, b]), np.zeros(2, dtype=np.uint8), 0)
        scale = 500.0 / jet.pt()
        out = jd.normalize_jet(jet)
        _, _, _, m_before = jd.kinematics_arrays(jet.momenta)
        _, _, _, m_after = jd.kinematics_arrays(out.momenta)
        assert np.allclose(m_after, m_before * scale, rtol=1e-9)
        before = jd.pairwise_matrix(jet)[0, 0, 1]
        after = jd.pairwise_matrix(out)[0, 0, 1]
        assert abs(before - after) < 1e-9

    def test_zero_pt_rejected(self):
        jet = jd.Jet(np.array([[0.0, 0.0, 1.0, 1.0]]), np.zeros(1, dtype=np.uint8), 0)
        with pytest.raises(jd.RejectedJetError):
            jd.normalize_jet(jet)

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_idempotent(self, seed):
        jet = random_jet(seed, jd.ClassLabel(seed % 7))
        once = jd.normalize_jet(jet)
        twice = jd.normalize_jet(once)
        assert np.allclose(twice.momenta, once.momenta, rtol=1e-12, atol=0.0)

    def test_log_feature_shifts(self):
        # ln m^2 shifts by 2 ln s, ln kT by ln s; ln dR and ln z invariant
        jet = random_jet(11, jd.ClassLabel.BB)
        out = jd.normalize_jet(jet)
        s = 500.0 / jet.pt()
        before = jd.pairwise_matrix(jet)
        after = jd.pairwise_matrix(out)
        n = jet.n_particles
        off = ~np.eye(n, dtype=bool)
        # keep clear of the clamp floor so shifts are exact
        clear = (before[1] > jd.LOG_FLOOR_SENTINEL + 5) & (before[3] > jd.LOG_FLOOR_SENTINEL + 5) & off
        assert np.allclose(after[0][off], before[0][off], atol=1e-9)
        assert np.allclose(after[2][off], before[2][off], atol=1e-9)
        assert np.allclose(after[1][clear], before[1][clear] + np.log(s), atol=1e-9)
        assert np.allclose(after[3][clear], before[3][clear] + 2 * np.log(s), atol=1e-9)


class TestSanitize:
    def test_identity(self):
        jet = random_jet(5)
        out, n = jd.sanitize_report(jet.copy(), jet)
        assert n == 0
        assert np.array_equal(out.momenta, jet.momenta)

    def test_nan_energy_reverted(self):
        jet = random_jet(6)
        broken = jet.copy()
        broken.momenta[2, 3] = np.nan
        out, n = jd.sanitize_report(broken, jet)
        assert n == 1
        assert np.array_equal(out.momenta, jet.momenta)

    def test_spacelike_reverted(self):
        jet = random_jet(7)
        broken = jet.copy()
        broken.momenta[0] = [2.0, 0.0, 0.0, 1.0]  # E=1, |p|=2
        out, n = jd.sanitize_report(broken, jet)
        assert n == 1
        assert np.array_equal(out.momenta[0], jet.momenta[0])
        assert np.array_equal(out.momenta[1:], broken.momenta[1:])

    def test_mismatched_counts_rejected(self):
        jet = random_jet(8)
        shorter = jd.Jet(jet.momenta[:-1], jet.type_flags[:-1], jet.label)
        with pytest.raises(jd.JetDataError):
            jd.sanitize(shorter, jet)


class TestPairwiseFeatures:
    def test_degenerate_pair_hits_clamp_floor(self):
        a = massless(50.0, 0.3, 1.0)
        lndr, lnkt, lnz, lnm2 = jd.pairwise_features(a, a)
        floor = jd.LOG_FLOOR_SENTINEL
        assert lndr == floor and lnkt == floor and lnm2 == floor
        assert abs(lnz - np.log(0.5)) < 1e-12

    def test_equal_pt_gives_ln_half(self):
        a = massless(80.0, 0.5, 0.4)
        b = massless(80.0, -0.2, -1.0)
        _, _, lnz, _ = jd.pairwise_features(a, b)
        assert abs(lnz - (-0.693147)) < 1e-6

    def test_massless_pair_against_4vector_oracle(self):
        # frozen from brute-force 4-vector arithmetic: pT=100 each,
        # dy=0.5, dphi=0 -> dR=0.5, kT=50, m^2=2552.519304127614
        a = massless(100.0, 0.25, 0.0)
        b = massless(100.0, -0.25, 0.0)
        lndr, lnkt, lnz, lnm2 = jd.pairwise_features(a, b)
        assert abs(np.exp(lndr) - 0.5) < 1e-12
        assert abs(np.exp(lnkt) - 50.0) < 1e-10
        assert abs(np.exp(lnm2) - 2552.519304127614) < 1e-6

    @given(st.integers(0, 5000), st.integers(0, 5000))
    @settings(max_examples=40, deadline=None)
    def test_symmetric(self, s1, s2):
        rng = toy_rng(s1 * 7919 + s2)
        pa = massless(rng.uniform(1, 200), rng.uniform(-2, 2), rng.uniform(-3, 3))
        pb = massless(rng.uniform(1, 200), rng.uniform(-2, 2), rng.uniform(-3, 3))
        assert jd.pairwise_features(pa, pb) == jd.pairwise_features(pb, pa)


class TestBuildBatch:
    def test_single_particle_jet(self):
        jet = jd.Jet(np.array([[10.0, 0.0, 1.0, 10.1]]), np.zeros(1, dtype=np.uint8), 2)
        batch = jd.build_batch([jet], nmax=8)
        assert batch.mask[0].sum() == 1.0
        assert batch.labels[0] == 2

    def test_truncation_drops_lowest_pt(self):
        rng = toy_rng(9)
        n = 12
        pts = np.arange(1.0, n + 1.0)
        rng.shuffle(pts)
        # phi = 0 keeps px == pt exactly, so the ordering is unambiguous
        parts = [massless(pt, rng.uniform(-1, 1), 0.0) for pt in pts]
        jet = jd.Jet.from_particles(parts, 0)
        kept = jd.truncate_to_nmax(jet, 7)
        assert sorted(kept.momenta[:, 0]) == sorted(pts)[-7:]

    def test_permutation_gives_row_permutation(self):
        jet = random_jet(10, jd.ClassLabel.QQ)
        rng = toy_rng(1)
        perm = rng.permutation(jet.n_particles)
        permuted = jd.Jet(jet.momenta[perm], jet.type_flags[perm], jet.label)
        b1 = jd.build_batch([jet], nmax=jet.n_particles)
        b2 = jd.build_batch([permuted], nmax=jet.n_particles)
        assert np.allclose(b2.features[0], b1.features[0][perm], atol=1e-12)
        assert np.allclose(b2.interactions[0], b1.interactions[0][:, perm][:, :, perm],
                           atol=1e-12)

    def test_padding_zeroed_and_interactions_sentinel(self):
        jet = random_jet(12, jd.ClassLabel.TAU_H_TAU_H)
        batch = jd.build_batch([jet], nmax=jet.n_particles + 5)
        n = jet.n_particles
        assert np.all(batch.features[0, n:] == 0.0)
        assert np.all(batch.mask[0, n:] == 0.0)
        assert np.all(batch.interactions[0, :, n:, :] == jd.LOG_FLOOR_SENTINEL)
        assert np.all(batch.interactions[0, :, :, n:] == jd.LOG_FLOOR_SENTINEL)

    def test_interactions_symmetric_diagonal_sentinel(self):
        jet = random_jet(13, jd.ClassLabel.QQB_BCS)
        batch = jd.build_batch([jet], nmax=32)
        inter = batch.interactions[0]
        assert np.allclose(inter, np.swapaxes(inter, -1, -2), atol=0.0)
        idx = np.arange(32)
        assert np.all(inter[:, idx, idx] == jd.LOG_FLOOR_SENTINEL)

    def test_empty_batch_rejected(self):
        with pytest.raises(jd.JetDataError):
            jd.build_batch([], nmax=4)


class TestToyGenerator:
    def test_qcd_busier_than_tau_e(self):
        rng = toy_rng(100)
        qcd = np.mean([jd.generate_toy_jet(jd.ClassLabel.QCD, rng).n_particles
                       for _ in range(10_000)])
        tau = np.mean([jd.generate_toy_jet(jd.ClassLabel.TAU_H_TAU_E, rng).n_particles
                       for _ in range(10_000)])
        assert qcd > tau

    @pytest.mark.parametrize("label", list(jd.ClassLabel))
    def test_generated_jets_pass_sanitize_unchanged(self, label):
        rng = toy_rng(int(label))
        for _ in range(200):
            jet = jd.generate_toy_jet(label, rng)
            out, n = jd.sanitize_report(jet.copy(), jet)
            assert n == 0
            assert 3 <= jet.n_particles <= 100

    def test_fixed_seed_bit_identical(self):
        a = [jd.generate_toy_jet(jd.ClassLabel(i % 7), toy_rng(55)) for i in range(3)]
        b = [jd.generate_toy_jet(jd.ClassLabel(i % 7), toy_rng(55)) for i in range(3)]
        for ja, jb in zip(a, b):
            assert np.array_equal(ja.momenta, jb.momenta)
            assert np.array_equal(ja.type_flags, jb.type_flags)

    def test_four_momentum_is_particle_sum(self):
        jet = random_jet(21, jd.ClassLabel.BB)
        assert np.allclose(jet.four_momentum(), jet.momenta.sum(axis=0), rtol=1e-12)


class TestJetIO:
    def write_read(self, tmp_path, name, jets):
        path = tmp_path / name
        jd.write_jets(path, jets)
        return list(jd.read_jets(path))

    @pytest.mark.parametrize("name", ["jets.jetb", "jets.jsonl"])
    def test_round_trip_bitwise(self, tmp_path, name):
        rng = toy_rng(77)
        jets = [jd.generate_toy_jet(jd.ClassLabel(i % 7), rng) for i in range(1000)]
        back = self.write_read(tmp_path, name, jets)
        assert len(back) == 1000
        for a, b in zip(jets, back):
            assert np.array_equal(a.momenta, b.momenta)
            assert np.array_equal(a.type_flags, b.type_flags)
            assert a.label == b.label

    def test_truncated_file_names_offset(self, tmp_path):
        path = tmp_path / "jets.jetb"
        rng = toy_rng(78)
        jd.write_jets(path, [jd.generate_toy_jet(jd.ClassLabel.QCD, rng)])
        data = path.read_bytes()
        path.write_bytes(data[:-7])
        with pytest.raises(jd.MalformedRecordError, match="byte offset"):
            list(jd.read_jets(path))

    def test_empty_file_is_empty_stream(self, tmp_path):
        path = tmp_path / "empty.jetb"
        path.write_bytes(b"")
        assert list(jd.read_jets(path)) == []

    def test_header_only_is_empty_stream(self, tmp_path):
        path = tmp_path / "jets.jetb"
        jd.write_jets(path, [])
        assert list(jd.read_jets(path)) == []

    def test_malformed_jsonl_names_record(self, tmp_path):
        path = tmp_path / "jets.jsonl"
        path.write_text('{"label": "bb", "particles": [{"px": 1.0}]}\n')
        with pytest.raises(jd.MalformedRecordError, match="record 0"):
            list(jd.read_jets(path))

    def test_bad_label_code_rejected(self, tmp_path):
        path = tmp_path / "jets.jetb"
        rng = toy_rng(79)
        jd.write_jets(path, [jd.generate_toy_jet(jd.ClassLabel.QCD, rng)])
        data = bytearray(path.read_bytes())
        # label byte sits right after the 4-byte count that follows the header
        header_len = 4 + 4 + len("px,py,pz,energy,type_flag")
        data[header_len + 4] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(jd.MalformedRecordError, match="label"):
            list(jd.read_jets(path))
