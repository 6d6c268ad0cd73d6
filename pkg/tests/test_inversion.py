import numpy as np
import pytest
import torch

from styleswap import losses
from styleswap.inversion import (
    InversionConfig,
    best_candidate_index,
    generate_with_styles,
    init_styles,
    inversion_objective,
    inversion_step,
    invert_one_to_many,
    invert_one_to_one,
)
from styleswap.networks import GeneratorConfig, SwapModel


def tiny_model(seed: int = 0) -> SwapModel:
    torch.manual_seed(seed)
    config = GeneratorConfig(
        num_blocks=2, style_dim=8, channel_schedule={4: 4, 8: 4}, attribute_channels={4: 2, 8: 2}
    )
    model = SwapModel(config, embed_dim=8, id_width=8)
    model.freeze_identity()
    return model


def image(seed: int, res: int = 8) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, 3, res, res, generator=g) * 2 - 1


def pool(seed: int, n: int = 3, res: int = 8) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, res, res, generator=g) * 2 - 1


class TestConfig:
    def test_rejects_bad_space(self):
        with pytest.raises(ValueError):
            InversionConfig(space="w_minus")

    def test_rejects_negative_iterations(self):
        with pytest.raises(ValueError):
            InversionConfig(iterations=-1)

    def test_requires_pool_when_iterating(self):
        model = tiny_model()
        cfg = InversionConfig(iterations=2, pool=None)
        with pytest.raises(ValueError):
            invert_one_to_many(image(1), cfg, model)


class TestInitStyles:
    def test_w_plus_tiles_mapped_style(self):
        model = tiny_model()
        src = image(1)
        tiled = init_styles(model, src, "w_plus")
        single = init_styles(model, src, "w")
        assert tiled.shape == (1, model.config.num_style_slots, 8)
        assert single.shape == (1, 8)
        assert torch.equal(tiled, single.unsqueeze(1).expand_as(tiled))
        assert tiled.requires_grad and single.requires_grad

    def test_matches_baseline_swap(self):
        model = tiny_model()
        src, tgt = image(1), image(2)
        styles = init_styles(model, src, "w_plus")
        with torch.no_grad():
            via_styles = generate_with_styles(model, tgt, styles, mask_enabled=True)
            baseline = model.swap(src, tgt, mask_enabled=True).blended
        assert torch.equal(via_styles, baseline)


class TestObjective:
    def test_straight_line_recomputation(self):
        model = tiny_model()
        cfg = InversionConfig(lambda_rec=100.0, lambda_id=10.0)
        src, distractor = image(3), image(4)
        styles = init_styles(model, src, "w_plus")
        with torch.no_grad():
            f_src = model.identity_embedder(src)
        objective, rec, idt = (
            t.detach() for t in inversion_objective(model, styles, src, f_src, distractor, cfg)
        )

        with torch.no_grad():
            w_r = model.style_mapper(model.identity_embedder(distractor))
            mid = generate_with_styles(model, src, w_r, True)
            cycle = generate_with_styles(model, mid, styles, True)
            rec_ref = losses.rec_loss(cycle, src, model.identity_embedder)
            id_ref = losses.id_loss(f_src, cycle, model.identity_embedder)
        assert float(rec) == pytest.approx(float(rec_ref), abs=1e-6)
        assert float(idt) == pytest.approx(float(id_ref), abs=1e-6)
        assert float(objective) == pytest.approx(100.0 * float(rec_ref) + 10.0 * float(id_ref), rel=1e-6)

    def test_zero_step_size_leaves_styles(self):
        model = tiny_model()
        cfg = InversionConfig(step_size=0.0)
        src = image(5)
        styles = init_styles(model, src, "w_plus")
        before = styles.detach().clone()
        opt = torch.optim.Adam([styles], lr=0.0, betas=(0.9, 0.999))
        inversion_step(styles, src, image(6), model, opt, cfg)
        assert torch.equal(styles.detach(), before)

    def test_step_moves_styles(self):
        model = tiny_model()
        cfg = InversionConfig()
        src = image(5)
        styles = init_styles(model, src, "w_plus")
        before = styles.detach().clone()
        opt = torch.optim.Adam([styles], lr=cfg.step_size, betas=(0.9, 0.999))
        inversion_step(styles, src, image(6), model, opt, cfg)
        assert not torch.equal(styles.detach(), before)


class TestOneToOne:
    def test_zero_iterations_returns_initialization(self):
        model = tiny_model()
        src, tgt = image(7), image(8)
        cfg = InversionConfig(iterations=0)
        result = invert_one_to_one(src, tgt, cfg, model)
        init = init_styles(model, src, "w_plus").detach()[0]
        assert torch.equal(result.styles, init)
        assert result.best_iteration == 1
        assert result.trace == []

    def test_trace_covers_every_iteration(self):
        model = tiny_model()
        cfg = InversionConfig(iterations=5, pool=pool(1), seed=3)
        result = invert_one_to_one(image(7), image(8), cfg, model)
        assert [r.iteration for r in result.trace] == [1, 2, 3, 4, 5]
        assert len(result.target_id_losses) == 5
        for record in result.trace:
            assert record.id_target is not None
            assert np.isfinite(record.rec) and np.isfinite(record.id_cycle)

    def test_dominance_over_initialization(self):
        model = tiny_model()
        src, tgt = image(9), image(10)
        cfg = InversionConfig(iterations=6, pool=pool(2), seed=1)
        result = invert_one_to_one(src, tgt, cfg, model)
        with torch.no_grad():
            f_src = model.identity_embedder(src)
            final_swap = generate_with_styles(model, tgt, result.styles[None], True)
            final_loss = float(losses.id_loss(f_src, final_swap, model.identity_embedder))
        # candidate 1 is the initialization, so the kept iterate can never be worse
        assert final_loss <= result.target_id_losses[0] + 1e-6
        assert final_loss == pytest.approx(min(result.target_id_losses), abs=1e-6)
        assert result.best_iteration == int(np.argmin(result.target_id_losses)) + 1

    def test_deterministic_given_seed(self):
        src, tgt, p = image(11), image(12), pool(3)
        results = []
        for _ in range(2):
            model = tiny_model(seed=2)
            cfg = InversionConfig(iterations=4, pool=p, seed=9)
            results.append(invert_one_to_one(src, tgt, cfg, model))
        assert torch.equal(results[0].styles, results[1].styles)
        assert [r.to_dict() for r in results[0].trace] == [r.to_dict() for r in results[1].trace]

    def test_seed_changes_distractor_order(self):
        src, tgt, p = image(11), image(12), pool(3)
        model = tiny_model(seed=2)
        a = invert_one_to_one(src, tgt, InversionConfig(iterations=4, pool=p, seed=0), model)
        b = invert_one_to_one(src, tgt, InversionConfig(iterations=4, pool=p, seed=1), model)
        assert not torch.equal(a.styles, b.styles) or a.trace != b.trace

    def test_w_space_returns_single_vector(self):
        model = tiny_model()
        cfg = InversionConfig(iterations=3, pool=pool(4), space="w")
        result = invert_one_to_one(image(13), image(14), cfg, model)
        assert result.styles.shape == (8,)
        assert result.space == "w"

    def test_w_plus_rows_diverge(self):
        model = tiny_model()
        cfg = InversionConfig(iterations=4, pool=pool(5))
        result = invert_one_to_one(image(15), image(16), cfg, model)
        if result.best_iteration > 1:
            rows = result.styles
            assert not all(torch.equal(rows[0], rows[k]) for k in range(1, rows.shape[0]))


class TestOneToMany:
    def test_returns_final_iterate_without_tracking(self):
        model = tiny_model()
        cfg = InversionConfig(iterations=3, pool=pool(6))
        result = invert_one_to_many(image(17), cfg, model)
        assert result.best_iteration is None
        assert result.target_id_losses == []
        assert len(result.trace) == 3
        assert all(r.id_target is None for r in result.trace)
        assert result.styles.shape == (model.config.num_style_slots, 8)

    def test_zero_iterations_returns_init(self):
        model = tiny_model()
        cfg = InversionConfig(iterations=0)
        src = image(18)
        result = invert_one_to_many(src, cfg, model)
        assert torch.equal(result.styles, init_styles(model, src, "w_plus").detach()[0])


class TestModelProtection:
    def test_parameters_untouched_and_flags_restored(self):
        model = tiny_model()
        flags = {n: p.requires_grad for n, p in model.named_parameters()}
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        cfg = InversionConfig(iterations=4, pool=pool(7))
        invert_one_to_one(image(19), image(20), cfg, model)
        for n, p in model.named_parameters():
            assert torch.equal(before[n], p.detach()), n
            assert flags[n] == p.requires_grad, n

    def test_flags_restored_on_error(self):
        model = tiny_model()
        cfg = InversionConfig(iterations=2, pool=None)
        with pytest.raises(ValueError):
            invert_one_to_many(image(21), cfg, model)
        assert any(p.requires_grad for p in model.generator.parameters())


class TestBestCandidate:
    def test_picks_minimum(self):
        assert best_candidate_index([0.5, 0.3, 0.4]) == 2

    def test_first_minimum_wins(self):
        assert best_candidate_index([0.4, 0.2, 0.2]) == 2

    def test_initialization_can_win(self):
        assert best_candidate_index([0.1, 0.3, 0.2]) == 1

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            best_candidate_index([])
