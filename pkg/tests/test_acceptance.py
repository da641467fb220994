"""Acceptance gate: one test per release criterion, at stated tolerances.

Run with ``pytest -s tests/test_acceptance.py`` to see the one-line
PASS/FAIL verdict each criterion prints. The desk-scale transfer analogue
trains twelve models (four architectures, three seeds) and runs four
attack configurations per seed; expect roughly twenty minutes on a laptop
CPU for the whole module.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from tatk import attack as atk
from tatk import data, evaluation, gradcheck, losses, nn
from tatk import tensor as T
from tatk import transforms as tr
from tatk.data import ImageBatch
from tatk.nn import ModelConfig
from tatk.tensor import Tensor


def verdict(name: str, passed: bool, detail: str) -> None:
    print(f"ACCEPTANCE {'PASS' if passed else 'FAIL'} {name}: {detail}")


# ---------------------------------------------------------------------------
# 1. Gradient correctness: every op < 1e-4, full attack pipeline < 1e-3,
#    runtime < 2 minutes.
# ---------------------------------------------------------------------------


def test_gradient_correctness():
    t0 = time.time()
    report = gradcheck.check_all_ops(seed=0)
    op_err = report.max_error

    # full pipeline: mixing + differentiable augmentations + composite loss,
    # frozen rng, against central differences
    model = nn.build_model(ModelConfig("cnn_a", (1, 8, 8), 3, seed=2))
    rng = np.random.default_rng(3)
    x = rng.uniform(0.25, 0.75, size=(2, 1, 8, 8))
    labels = np.array([0, 1])
    mix_cfg = tr.MixRoundConfig()
    loss_cfg = losses.LossConfig(smoothing_weight=5.0)
    plans = tr.sample_m_round_plans(2, 8, 8, mix_cfg, 3, np.random.default_rng(11))

    def pipeline_loss(arr, leaf=None):
        total = 0.0
        grad = np.zeros_like(arr)
        for plan in plans:
            t = leaf if leaf is not None else Tensor(arr)
            transformed = tr.apply_round_plan(ImageBatch(t, labels), plan)
            loss = losses.total_loss(model.forward_logits(transformed.images),
                                     transformed.labels, t, Tensor(x), loss_cfg)
            if leaf is not None:
                loss.backward()
            total += loss.item()
        return total / len(plans)

    leaf = Tensor(x, requires_grad=True)
    pipeline_loss(x, leaf=leaf)
    analytic = leaf.grad / len(plans)

    h = 1e-5
    flat = x.copy().reshape(-1)
    errs = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = pipeline_loss(flat.reshape(x.shape))
        flat[i] = orig - h
        fm = pipeline_loss(flat.reshape(x.shape))
        flat[i] = orig
        fd = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        errs.append(abs(a - fd) / max(abs(a) + abs(fd), 1e-4))
    pipeline_err = max(errs)
    elapsed = time.time() - t0

    ok = report.passed and op_err < 1e-4 and pipeline_err < 1e-3 and elapsed < 120
    verdict("gradient-correctness", ok,
            f"per-op max rel err {op_err:.2e} (<1e-4), "
            f"pipeline max rel err {pipeline_err:.2e} (<1e-3), {elapsed:.0f}s (<120s)")
    assert report.passed
    assert op_err < 1e-4
    assert pipeline_err < 1e-3
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 2. Constraint invariants: 1e3+ attack steps across randomized configs,
#    zero violations of the epsilon ball and [0,1] domain.
# ---------------------------------------------------------------------------


def test_constraint_invariants():
    rng = np.random.default_rng(42)
    total_steps = 0
    violations = 0
    runs = 0
    while total_steps < 1000:
        model = nn.build_model(ModelConfig("cnn_a", (1, 8, 8), 3,
                                           seed=int(rng.integers(1000))))
        images = rng.uniform(0, 1, size=(2, 1, 8, 8))
        batch = ImageBatch(Tensor(images), rng.integers(0, 3, size=2))
        eps = float(rng.uniform(2, 40)) / 255.0
        cfg = atk.AttackConfig(
            epsilon=eps,
            alpha=float(rng.uniform(0.2, 1.0)) * eps,
            iterations=10,
            rounds=int(rng.integers(1, 3)),
            mix=tr.MixRoundConfig(eta=float(rng.uniform(0.1, 0.9))),
            loss=losses.LossConfig(smoothing_weight=float(rng.choice([0.0, 1.0, 200.0]))),
            mix_strategy=str(rng.choice(atk.MIX_STRATEGIES)),
            use_momentum=bool(rng.integers(2)),
            seed=int(rng.integers(10000)),
        )
        clean = batch.images.data

        def check(state, clean=clean, eps=eps):
            nonlocal total_steps, violations
            total_steps += 1
            if np.abs(state.x_adv - clean).max() > eps + 1e-9:
                violations += 1
            if state.x_adv.min() < 0.0 or state.x_adv.max() > 1.0:
                violations += 1

        atk.run_attack(model, batch, cfg, state_hook=check)
        runs += 1
    verdict("constraint-invariants", violations == 0,
            f"{total_steps} steps over {runs} randomized configs, {violations} violations")
    assert violations == 0
    assert total_steps >= 1000


# ---------------------------------------------------------------------------
# 3. Eq.-level oracles: brute-force implementations to 1e-10; exact ASR.
# ---------------------------------------------------------------------------


def test_equation_level_oracles():
    rng = np.random.default_rng(5)
    worst = 0.0

    # local mixing against a pixel-loop oracle
    for _ in range(5):
        b, c, h, w = 3, 2, 7, 6
        s1 = rng.uniform(size=(b, c, h, w))
        s2 = rng.uniform(size=(b, c, h, w))
        masks = [tr.sample_rect_mask(h, w, (0.2, 0.9), rng) for _ in range(b)]
        eta = float(rng.uniform(0.1, 0.9))
        got = tr.local_mix(ImageBatch(Tensor(s1), np.zeros(b, dtype=int)),
                           ImageBatch(Tensor(s2), np.zeros(b, dtype=int)),
                           masks, eta).images.data
        want = s1.copy()
        for n, m in enumerate(masks):
            for y in range(m.top, m.top + m.height):
                for xx in range(m.left, m.left + m.width):
                    for ch in range(c):
                        want[n, ch, y, xx] = eta * s1[n, ch, y, xx] + (1 - eta) * s2[n, ch, y, xx]
        worst = max(worst, float(np.abs(got - want).max()))

    # smoothing loss against a direct window-average loop
    for _ in range(3):
        delta = rng.uniform(-0.1, 0.1, size=(2, 2, 6, 5))
        k = 3
        acc = 0.0
        for n in range(2):
            for ch in range(2):
                for y in range(6):
                    for xx in range(5):
                        s = 0.0
                        for dy in range(-1, 2):
                            for dx in range(-1, 2):
                                yy = min(max(y + dy, 0), 5)
                                xq = min(max(xx + dx, 0), 4)
                                s += delta[n, ch, yy, xq]
                        acc += abs(s / (k * k))
        got = losses.smoothing_loss(Tensor(delta), Tensor(np.zeros_like(delta)), k).item()
        worst = max(worst, abs(got - acc))

    # momentum update against the explicit formula
    for _ in range(5):
        g = rng.standard_normal((2, 3))
        g_bar = rng.standard_normal((2, 3))
        want = g + g_bar / np.abs(g_bar).sum()
        worst = max(worst, float(np.abs(atk.momentum_update(g, g_bar) - want).max()))

    # step_and_clip against a scalar loop
    for _ in range(5):
        clean = rng.uniform(size=(2, 1, 4, 4))
        x = np.clip(clean + rng.uniform(-0.03, 0.03, size=clean.shape), 0, 1)
        g = rng.standard_normal(clean.shape)
        g.reshape(-1)[::5] = 0.0
        alpha, eps = 0.01, 0.03
        got = atk.step_and_clip(x, g, clean, alpha, eps)
        want = np.empty_like(x)
        for i in range(x.size):
            s = 0.0 if g.flat[i] == 0 else np.copysign(1.0, g.flat[i])
            want.flat[i] = min(max(x.flat[i] + alpha * s,
                                   max(clean.flat[i] - eps, 0.0)),
                               min(clean.flat[i] + eps, 1.0))
        worst = max(worst, float(np.abs(got - want).max()))

    # ASR against an explicit recount
    model = nn.build_model(ModelConfig("mlp", (1, 8, 8), 3, seed=1))
    images = rng.uniform(size=(10, 1, 8, 8))
    labels = rng.integers(0, 3, size=10)
    rec = evaluation.compute_asr(model, ImageBatch(Tensor(images), labels), labels)
    recount = sum(
        1 for i in range(10)
        if nn.predict(model, Tensor(images[i : i + 1]))[0] != labels[i]
    )
    asr_exact = rec.n_error == recount and rec.asr_percent == 100.0 * recount / 10

    ok = worst < 1e-10 and asr_exact
    verdict("equation-oracles", ok,
            f"max deviation from brute force {worst:.2e} (<1e-10), ASR recount exact={asr_exact}")
    assert worst < 1e-10
    assert asr_exact


# ---------------------------------------------------------------------------
# 4. Degeneration identities: PGD/MIM bitwise, full-mask local mix == admix.
# ---------------------------------------------------------------------------


def test_degeneration_identities():
    model = nn.build_model(ModelConfig("cnn_a", (1, 8, 8), 3, seed=9))
    rng = np.random.default_rng(10)
    images = rng.uniform(0.2, 0.8, size=(3, 1, 8, 8))
    labels = nn.predict(model, Tensor(images))
    batch = ImageBatch(Tensor(images), labels)
    base = atk.AttackConfig(epsilon=8 / 255, alpha=1 / 255, iterations=6, rounds=1,
                            seed=4, use_momentum=False,
                            loss=losses.LossConfig(loss_kind="cross_entropy"),
                            mix_strategy="no_mix")

    def reference(momentum):
        x_clean = images.copy()
        x = x_clean.copy()
        g = np.zeros_like(x)
        out = []
        for _ in range(base.iterations):
            leaf = Tensor(x, requires_grad=True)
            T.cross_entropy(T.softmax(model.forward_logits(leaf)), labels).backward()
            g_bar = leaf.grad
            g = g + g_bar / np.abs(g_bar).sum() if momentum else g_bar
            x = np.clip(x + base.alpha * np.sign(g),
                        np.maximum(x_clean - base.epsilon, 0.0),
                        np.minimum(x_clean + base.epsilon, 1.0))
            out.append(x.copy())
        return out

    mismatches = 0
    for momentum in (False, True):
        cfg = replace(base, use_momentum=momentum)
        states = []
        atk.run_attack(model, batch, cfg, state_hook=states.append)
        for st, want in zip(states, reference(momentum)):
            if not np.array_equal(st.x_adv, want):
                mismatches += 1

    # full-image-mask local mixing must equal the global admix round bitwise
    mix_cfg = atk.AttackConfig(epsilon=8 / 255, alpha=1 / 255, iterations=4, rounds=2,
                               seed=6, mix_strategy="global_admix")
    full_mask = replace(mix_cfg, mix_strategy="local_mix",
                        mix=tr.MixRoundConfig(eta=0.5, rect_fraction_range=(1.0, 1.0)))
    a = atk.run_attack(model, batch, mix_cfg).adversarial.images.data
    b = atk.run_attack(model, batch, full_mask).adversarial.images.data
    admix_equal = np.array_equal(a, b)

    ok = mismatches == 0 and admix_equal
    verdict("degeneration-identities", ok,
            f"PGD/MIM trace mismatches={mismatches} (bitwise), "
            f"full-mask==admix bitwise={admix_equal}")
    assert mismatches == 0
    assert admix_equal


# ---------------------------------------------------------------------------
# 5. Gradient-vanishing contrast at softmax saturation.
# ---------------------------------------------------------------------------


def test_gradient_vanishing_contrast():
    b = 4
    z_data = np.zeros((b, 3))
    z_data[:, 0] = 25.0  # true-class softmax probability >= 1 - 1e-9
    labels = np.zeros(b, dtype=int)
    probs = T.softmax(Tensor(z_data)).data
    assert probs[:, 0].min() >= 1.0 - 1e-9

    z_ce = Tensor(z_data, requires_grad=True)
    losses.cross_entropy_loss(z_ce, labels).backward()
    ce_norm = float(np.abs(z_ce.grad).max())

    z_lg = Tensor(z_data, requires_grad=True)
    losses.logit_loss(z_lg, labels).backward()
    logit_entries = z_lg.grad[np.arange(b), labels]
    logit_exact = np.all(logit_entries == -1.0 / b)

    ok = ce_norm < 1e-8 and bool(logit_exact)
    verdict("gradient-vanishing-contrast", ok,
            f"CE grad Linf {ce_norm:.2e} (<1e-8), logit grad == -1/b exactly: {bool(logit_exact)}")
    assert ce_norm < 1e-8
    assert logit_exact


# ---------------------------------------------------------------------------
# 6+7. Desk-scale transfer analogue and sweep sanity (shared fixture).
# ---------------------------------------------------------------------------

SEEDS = (7, 8, 9)
N_CANDIDATES = 48
ARCH_EPOCHS = (("cnn_a", 20), ("cnn_b", 20), ("cnn_c", 20), ("mlp", 40))
TARGETS = ("cnn_b", "cnn_c", "mlp")


@pytest.fixture(scope="module")
def desk_scale_runs():
    t0 = time.time()
    per_seed = []
    for seed in SEEDS:
        scene = data.SyntheticSceneConfig(num_classes=5, images_per_class=200,
                                          image_size=32, seed=seed)
        ds = data.generate_synthetic(scene)
        train, test = data.split(ds, 0.8, seed=seed + 1)
        models = {}
        accs = {}
        for i, (arch, epochs) in enumerate(ARCH_EPOCHS):
            model = nn.build_model(ModelConfig(arch, (3, 32, 32), 5, seed=seed * 100 + i))
            nn.train(model, train, epochs=epochs, lr=0.01, momentum=0.9,
                     batch_size=32, seed=seed * 100 + i)
            models[arch] = model
            accs[arch] = nn.evaluate_accuracy(model, test)
        candidates = evaluation.filter_candidates(models, test)
        idx = np.linspace(0, len(candidates) - 1, N_CANDIDATES).round().astype(int)
        candidates = candidates.subset(sorted(set(idx.tolist())))

        base = atk.AttackConfig(seed=seed, batch_size=N_CANDIDATES)  # paper defaults
        arms = {
            "ours": base,
            # identical rounds make the no-mix averaged gradient equal a
            # single round's, so one round suffices for the ablation arm
            "no_mix": replace(base, mix_strategy="no_mix", rounds=1),
            "mim": atk.variant_config("mim", base),
            "ours_m1": replace(base, rounds=1),
        }
        rates = {}
        for arm, cfg in arms.items():
            adv = evaluation.generate_adversarials(models["cnn_a"], candidates, cfg)
            rates[arm] = {
                t: evaluation.compute_asr(m, adv, adv.labels).asr_percent
                for t, m in models.items()
            }
        per_seed.append({"accs": accs, "rates": rates})
    return {"seeds": per_seed, "elapsed": time.time() - t0}


def _mean_black_box(per_seed, arm):
    return float(np.mean([
        np.mean([s["rates"][arm][t] for t in TARGETS]) for s in per_seed
    ]))


def test_desk_scale_transfer_analogue(desk_scale_runs):
    per_seed = desk_scale_runs["seeds"]
    elapsed = desk_scale_runs["elapsed"]

    min_target_acc = min(s["accs"][t] for s in per_seed for t in TARGETS)
    white_box = float(np.mean([s["rates"]["ours"]["cnn_a"] for s in per_seed]))
    ours_bb = _mean_black_box(per_seed, "ours")
    mim_bb = _mean_black_box(per_seed, "mim")
    no_mix_bb = _mean_black_box(per_seed, "no_mix")

    ok = (min_target_acc >= 0.95 and white_box >= 90.0
          and ours_bb >= mim_bb - 2.0 and ours_bb >= no_mix_bb - 2.0
          and elapsed < 1800)
    verdict("desk-scale-transfer", ok,
            f"target accs >= {min_target_acc:.3f} (>=0.95), "
            f"white-box {white_box:.1f}% (>=90), "
            f"black-box ours {ours_bb:.1f}% vs MIM {mim_bb:.1f}% vs no-mix {no_mix_bb:.1f}% "
            f"(ours >= baseline - 2pp), {elapsed:.0f}s (<1800s)")
    assert min_target_acc >= 0.95
    assert white_box >= 90.0
    assert ours_bb >= mim_bb - 2.0
    assert ours_bb >= no_mix_bb - 2.0
    assert elapsed < 1800


def test_sweep_sanity(desk_scale_runs):
    per_seed = desk_scale_runs["seeds"]
    # eta: 0.5 is the full method; 0 reverts to no mixing
    eta_half = _mean_black_box(per_seed, "ours")
    eta_zero = _mean_black_box(per_seed, "no_mix")
    # M: 25 is the full method; 1 is a single transformation round
    m_25 = eta_half
    m_1 = _mean_black_box(per_seed, "ours_m1")

    ok = eta_half >= eta_zero and m_25 >= m_1
    verdict("sweep-sanity", ok,
            f"ASR(eta=0.5)={eta_half:.1f} >= ASR(eta=0)={eta_zero:.1f}; "
            f"ASR(M=25)={m_25:.1f} >= ASR(M=1)={m_1:.1f} (3-seed means)")
    assert eta_half >= eta_zero
    assert m_25 >= m_1


# ---------------------------------------------------------------------------
# 8. Reproducibility: rerun -> bitwise-identical CSV.
# ---------------------------------------------------------------------------


def test_reproducibility_bitwise_csv(tmp_path):
    scene = data.SyntheticSceneConfig(num_classes=3, images_per_class=50,
                                      image_size=16, seed=3)
    ds = data.generate_synthetic(scene)
    train, test = data.split(ds, 0.8, seed=4)
    models = {}
    for name, arch, seed in (("a", "cnn_a", 1), ("m", "mlp", 2)):
        model = nn.build_model(ModelConfig(arch, (3, 16, 16), 3, seed=seed))
        nn.train(model, train, epochs=15, lr=0.02, batch_size=16, seed=seed)
        models[name] = model
    ckpts = {}
    for name, model in models.items():
        path = tmp_path / f"{name}.ckpt"
        nn.save_checkpoint(model, path)
        ckpts[name] = path

    cfg = atk.AttackConfig(epsilon=12 / 255, alpha=2 / 255, iterations=5, rounds=3,
                           seed=9, batch_size=16)
    blobs = []
    for run in range(2):
        loaded = {name: nn.load_checkpoint(path) for name, path in ckpts.items()}
        matrix = evaluation.run_transfer_experiment(loaded, test, cfg,
                                                    metadata={"config_hash": "acc8"})
        out = tmp_path / f"run{run}.csv"
        evaluation.export_matrix(matrix, out, "csv")
        blobs.append(out.read_bytes())
    identical = blobs[0] == blobs[1]
    verdict("reproducibility", identical,
            f"rerun from checkpoints+config+seed gives identical CSV bytes: {identical}")
    assert identical
