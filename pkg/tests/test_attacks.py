import math

import numpy as np
import pytest

from recattack import gradcore as gc
from recattack.attacks import (EXCLUSIVE_TARGET, PerturbationBudget, build_objective, craft,
                               exclusive_targeted_objective, exclusive_targets, image_embedding_objective,
                               permuted_targeted_objective, permuted_targets, pgd_ascent, random_start,
                               untargeted_textual_objective)
from recattack.boxcodec import BoundingBox, encode_box
from recattack.grounder import init_model, sequence_nll
from recattack.scenegen import IMAGE_SHAPE, SceneAnnotation, SceneObject, generate_scene

from oracles import naive_sequence_nll

EPS = 16 / 255


@pytest.fixture(scope="module")
def model():
    return init_model(1)


@pytest.fixture(scope="module")
def uniform():
    m = init_model(0)
    for name in m.params:
        if name.startswith("out"):
            m.params[name] = np.zeros_like(m.params[name])
    return m


def test_pgd_linear_saturates_ball():
    res = pgd_ascent(lambda v: gc.sum(v), np.array([0.5]), PerturbationBudget())
    assert res.x_adv[0] == pytest.approx(0.5 + 16 / 255, abs=1e-12)
    assert len(res.trace) == 100
    # the ball is reached after 16 steps and the iterate stays put
    assert res.trace[16] == pytest.approx(res.trace[-1], abs=1e-12)


def test_pgd_constant_objective_is_fixed_point():
    x = np.random.default_rng(0).uniform(size=(2, 5))
    res = pgd_ascent(lambda v: gc.sum(gc.scale(v, 0.0)), x, PerturbationBudget())
    np.testing.assert_array_equal(res.x_adv, x)
    assert res.linf == 0.0


def test_pgd_respects_pixel_range():
    x = np.array([0.99, 0.01])
    res = pgd_ascent(lambda v: gc.sum(gc.mul(v, gc.constant([1.0, -1.0]))), x, PerturbationBudget())
    np.testing.assert_allclose(res.x_adv, [1.0, 0.0])


def test_pgd_rejects_nonfinite_gradient():
    def bad(v):
        return gc.sum(gc.scale(v, float("nan")))
    with pytest.raises(FloatingPointError, match="step 0"):
        pgd_ascent(bad, np.zeros(3), PerturbationBudget())


@pytest.mark.parametrize("eps,alpha,iters", [(0.1, 0.2, 10), (0, 0, 10), (0.1, 0.01, 0), (1.5, 0.1, 1)])
def test_budget_validation(eps, alpha, iters):
    with pytest.raises(ValueError):
        PerturbationBudget(eps, alpha, iters)


def test_budget_pixel_scale():
    assert PerturbationBudget.from_pixels(16, 1, 100) == PerturbationBudget()


def test_random_start_is_feasible_and_seeded():
    x = np.random.default_rng(0).uniform(size=(2,) + IMAGE_SHAPE)
    a, b = random_start(x, PerturbationBudget(), 3), random_start(x, PerturbationBudget(), 3)
    np.testing.assert_array_equal(a, b)
    assert np.max(np.abs(a - x)) <= EPS and a.min() >= 0 and a.max() <= 1


@pytest.mark.parametrize("kind", ["image-embed", "textual-box", "exclusive", "permuted"])
def test_craft_feasible_and_deterministic(model, kind):
    scenes = [generate_scene(s, 3) for s in range(3)]
    budget = PerturbationBudget(iters=5)
    r1 = craft(kind, model, scenes, budget)
    r2 = craft(kind, model, scenes, budget)
    np.testing.assert_array_equal(r1.x_adv, r2.x_adv)
    x = np.stack([s.image for s in scenes])
    assert np.max(np.abs(r1.x_adv - x)) <= EPS + 1e-9
    assert r1.x_adv.min() >= 0.0 and r1.x_adv.max() <= 1.0
    assert r1.linf <= EPS + 1e-9


def test_embedding_objective_zero_at_clean(model):
    x = generate_scene(0, 2).image
    assert image_embedding_objective(model, x, gc.constant(x)).value == 0.0
    other = np.clip(x + 0.03, 0, 1)
    assert image_embedding_objective(model, x, gc.constant(other)).value > 0.0


def test_uniform_model_objective_values(uniform):
    scene = generate_scene(4, 3)
    x = gc.constant(scene.image)
    assert untargeted_textual_objective(uniform, x, scene).value == pytest.approx(3 * 4 * math.log(100))
    assert exclusive_targeted_objective(uniform, x, scene).value == pytest.approx(-3 * 4 * math.log(100))
    assert permuted_targeted_objective(uniform, x, scene).value == pytest.approx(-3 * 4 * math.log(100))


def test_single_object_reduces_to_sequence_nll(model):
    base = generate_scene(9, 2)
    scene = SceneAnnotation(base.image, base.objects[:1])
    obj = scene.objects[0]
    got = untargeted_textual_objective(model, gc.constant(scene.image), scene).value
    assert got == pytest.approx(sequence_nll(model, scene.image, obj.prompt, encode_box(obj.box)).value, abs=1e-12)


def test_default_exclusive_target():
    assert encode_box(EXCLUSIVE_TARGET) == (0, 0, 20, 20)
    assert exclusive_targets(generate_scene(0, 3)) == [[(0, 0, 20, 20)] * 3]


def test_permuted_target_mapping():
    scene = generate_scene(2, 3)
    tokens = [encode_box(o.box) for o in scene.objects]
    assert permuted_targets(scene) == [[tokens[1], tokens[2], tokens[0]]]
    pair = generate_scene(2, 2)
    t = [encode_box(o.box) for o in pair.objects]
    assert permuted_targets(pair) == [[t[1], t[0]]]


def test_permuted_rejects_single_object(model):
    base = generate_scene(9, 2)
    lone = SceneAnnotation(base.image, base.objects[:1])
    with pytest.raises(ValueError):
        permuted_targets(lone)
    with pytest.raises(ValueError):
        build_objective("permuted", model, [lone], lone.image[None])


def test_identical_boxes_make_permuted_equal_negated_untargeted(model):
    base = generate_scene(11, 3)
    box = BoundingBox(0.1, 0.1, 0.4, 0.4)
    scene = SceneAnnotation(base.image, tuple(SceneObject(o.prompt, box) for o in base.objects))
    x = gc.constant(scene.image)
    assert permuted_targeted_objective(model, x, scene).value == pytest.approx(
        -untargeted_textual_objective(model, x, scene).value, abs=1e-12)


def test_textual_objectives_match_oracle(model):
    rng = np.random.default_rng(8)
    for seed in range(5):
        scene = generate_scene(seed, 2 + seed % 3)
        x = np.clip(scene.image + rng.uniform(-EPS, EPS, IMAGE_SHAPE), 0, 1)
        node = gc.constant(x)
        gt = sum(naive_sequence_nll(model, x, o.prompt, encode_box(o.box)) for o in scene.objects)
        excl = -sum(naive_sequence_nll(model, x, o.prompt, (0, 0, 20, 20)) for o in scene.objects)
        n = len(scene.objects)
        perm = -sum(naive_sequence_nll(model, x, scene.objects[i].prompt,
                                       encode_box(scene.objects[(i + 1) % n].box)) for i in range(n))
        assert abs(untargeted_textual_objective(model, node, scene).value - gt) < 1e-9
        assert abs(exclusive_targeted_objective(model, node, scene).value - excl) < 1e-9
        assert abs(permuted_targeted_objective(model, node, scene).value - perm) < 1e-9


def test_batched_objective_is_sum_of_scenes(model):
    scenes = [generate_scene(s, 2 + s % 3) for s in range(3)]
    x = np.stack([s.image for s in scenes])
    batched = untargeted_textual_objective(model, gc.constant(x), scenes).value
    single = sum(untargeted_textual_objective(model, gc.constant(s.image), s).value for s in scenes)
    assert batched == pytest.approx(single, abs=1e-9)


def _objectives(model, scene):
    return {
        "image-embed": lambda v: image_embedding_objective(model, scene.image, v),
        "textual-box": lambda v: untargeted_textual_objective(model, v, scene),
        "exclusive": lambda v: exclusive_targeted_objective(model, v, scene),
        "permuted": lambda v: permuted_targeted_objective(model, v, scene),
    }


@pytest.mark.parametrize("kind", ["image-embed", "textual-box", "exclusive", "permuted"])
def test_objective_gradients_match_finite_differences(model, kind):
    scene = generate_scene(21, 3)
    build = _objectives(model, scene)[kind]
    for seed in range(3):
        rng = np.random.default_rng(seed)
        point = np.clip(scene.image + rng.uniform(-EPS, EPS, IMAGE_SHAPE), 0, 1)
        _, analytic = gc.grad(build, point)
        idx = rng.choice(point.size, 30, replace=False)
        numeric = gc.finite_difference_gradient(lambda p: build(gc.constant(p)).value, point, 1e-5, indices=idx)
        assert gc.relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx]).max() < 1e-4


@pytest.mark.parametrize("kind", ["textual-box", "exclusive", "permuted"])
def test_first_step_ascends(model, kind):
    scene = generate_scene(13, 3)
    build = _objectives(model, scene)[kind]
    before = build(gc.constant(scene.image)).value
    res = pgd_ascent(build, scene.image, PerturbationBudget(epsilon=1e-4, alpha=1e-4, iters=1))
    assert build(gc.constant(res.x_adv)).value > before


def test_first_step_ascends_embedding_from_offset(model):
    # the embedding distance is flat at x itself, so step from a nearby point
    scene = generate_scene(13, 3)
    build = _objectives(model, scene)["image-embed"]
    start = random_start(scene.image, PerturbationBudget(), 0)
    before = build(gc.constant(start)).value
    res = pgd_ascent(build, scene.image, PerturbationBudget(epsilon=EPS, alpha=1e-4, iters=1), start=start)
    assert build(gc.constant(res.x_adv)).value > before
