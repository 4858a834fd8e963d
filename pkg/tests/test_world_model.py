import pytest
import torch

from dataset import collate
from errors import ContractViolation, DataFormatError, NumericError
from objectives import model_loss
from world_model import ACTION_FREE, LABELED, build_world_model, load_checkpoint, save_checkpoint
from conftest import tiny_model_config


def count_calls(module):
    calls = []
    module.register_forward_hook(lambda *_: calls.append(1))
    return calls


def test_init_state_is_zero(make_world_model):
    wm = make_world_model()
    s = wm.init_state(2)
    assert s.deter.shape == (2, 8) and s.stoch.shape == (2, 4)
    assert not s.deter.any() and not s.stoch.any()
    with pytest.raises(ContractViolation):
        wm.init_state(0)


def test_posterior_step_shapes(make_world_model):
    wm = make_world_model()
    s = wm.posterior_step(wm.init_state(2), wm.initial_action(2), wm.encode_obs(torch.zeros(2, 3, dtype=torch.float64)))
    assert s.feat().shape == (2, 12)
    assert s.stoch_dist.mean.shape == (2, 4)


def test_step_rejects_wrong_action_dim(make_world_model):
    wm = make_world_model()
    with pytest.raises(ContractViolation):
        wm.prior_step(wm.init_state(1), torch.zeros(1, 5, dtype=torch.float64))


def test_encode_rejects_non_finite_observation(make_world_model):
    wm = make_world_model()
    with pytest.raises(NumericError):
        wm.encode_obs(torch.tensor([[float("nan"), 0.0, 0.0]], dtype=torch.float64))


def test_decoded_action_mean_within_bounds(make_world_model):
    wm = make_world_model()
    s = wm.init_state(64)
    u = 50.0 * torch.randn(64, 3, dtype=torch.float64)
    dec = wm.decode_action(s, u)
    assert (dec.mean.abs() <= 1.0).all()
    assert (dec.stddev >= 0.01).all()


def test_lawm_prior_is_standard_normal_clap_prior_is_learned(make_world_model):
    lawm, clap = make_world_model(prior_mode="lawm"), make_world_model(prior_mode="clap")
    assert lawm.action_prior_head is None and clap.action_prior_head is not None
    prior = lawm.latent_action_prior(lawm.init_state(2))
    assert torch.equal(prior.mean, torch.zeros(2, 3, dtype=torch.float64))
    assert torch.equal(prior.stddev, torch.ones(2, 3, dtype=torch.float64))
    assert clap.latent_action_prior(clap.init_state(2)).mean.shape == (2, 3)


def test_labeled_filtering_never_uses_action_free_posterior(make_world_model, make_trajectory):
    wm = make_world_model()
    free_calls, labeled_calls = count_calls(wm.action_posterior_free), count_calls(wm.action_posterior)
    res = wm.observe_trajectory(collate([make_trajectory(T=4)], labeled=True, dtype=torch.float64), LABELED)
    assert not free_calls and len(labeled_calls) == 4
    assert res.states.deter.shape == (1, 4, 8)
    assert res.action_mask.shape == (1, 4)


def test_action_free_filtering_never_uses_labeled_posterior(make_world_model, make_trajectory):
    wm = make_world_model()
    free_calls, labeled_calls = count_calls(wm.action_posterior_free), count_calls(wm.action_posterior)
    res = wm.observe_trajectory(collate([make_trajectory(T=4)], labeled=False, dtype=torch.float64), ACTION_FREE)
    assert not labeled_calls and len(free_calls) == 3
    # the last step has no o_{t+1}
    assert res.states.deter.shape == (1, 4, 8)
    assert res.latent_actions.shape == (1, 3, 3)


def test_action_free_window_with_tail_observation(make_world_model, make_trajectory):
    wm = make_world_model()
    a, b = make_trajectory(T=4, labeled=False, seed=1), make_trajectory(T=4, labeled=False, seed=2)
    a.next_obs = make_trajectory(T=1, seed=3).obs[0]
    res = wm.observe_trajectory(collate([a, b], labeled=False, dtype=torch.float64), ACTION_FREE)
    assert res.action_mask.shape == (2, 4)
    assert res.action_mask[:, -1].tolist() == [1.0, 0.0]


def test_filtering_mode_preconditions(make_world_model, make_trajectory):
    wm = make_world_model()
    with pytest.raises(ContractViolation):
        wm.observe_trajectory(collate([make_trajectory(T=1)], labeled=False, dtype=torch.float64), ACTION_FREE)
    with pytest.raises(ContractViolation):
        wm.observe_trajectory(collate([make_trajectory(T=3)], labeled=False, dtype=torch.float64), LABELED)
    with pytest.raises(ContractViolation):
        wm.observe_trajectory(collate([make_trajectory(T=3)], labeled=True, dtype=torch.float64), "bogus")


def test_eval_mode_is_deterministic(make_world_model, make_trajectory):
    wm = make_world_model()
    wm.eval()
    batch = collate([make_trajectory(T=5)], labeled=True, dtype=torch.float64)
    first = wm.observe_trajectory(batch, LABELED)
    second = wm.observe_trajectory(batch, LABELED)
    assert torch.equal(first.states.stoch, second.states.stoch)
    assert torch.equal(first.states.stoch, first.states.stoch_dist.mean)


def test_training_mode_samples_from_generator(make_world_model, make_trajectory):
    wm = make_world_model()
    batch = collate([make_trajectory(T=5)], labeled=True, dtype=torch.float64)
    wm.generator.manual_seed(11)
    first = wm.observe_trajectory(batch, LABELED)
    wm.generator.manual_seed(11)
    second = wm.observe_trajectory(batch, LABELED)
    assert torch.equal(first.states.stoch, second.states.stoch)
    assert not torch.equal(first.states.stoch, first.states.stoch_dist.mean)


def policy_from_prior(wm):
    def policy(s):
        u = torch.zeros(*s.batch_shape, wm.cfg.latent_action_size, dtype=s.deter.dtype)
        return u, torch.zeros(s.batch_shape, dtype=s.deter.dtype)
    return policy


def test_imagine_shapes(make_world_model):
    wm = make_world_model()
    out = wm.imagine(wm.init_state(6), policy_from_prior(wm), horizon=4)
    assert out.states.deter.shape == (5, 6, 8)
    assert out.rewards.shape == (4, 6)
    assert out.actions.shape == (4, 6, 2)
    assert out.log_probs.shape == (4, 6)


def test_imagine_preconditions(make_world_model):
    wm = make_world_model()
    with pytest.raises(ContractViolation):
        wm.imagine(wm.init_state(1), policy_from_prior(wm), horizon=0)
    start = wm.init_state(1)
    start.deter.requires_grad_(True)
    with pytest.raises(ContractViolation):
        wm.imagine(start, policy_from_prior(wm), horizon=2)


def test_checkpoint_roundtrip(tmp_path, make_world_model):
    wm = make_world_model(dtype=torch.float32)
    path = save_checkpoint(str(tmp_path / "wm.pt"), {"world_model": wm.state_dict(), "model_spec": {
        "obs_dim": 3, "act_dim": 2, "action_bound": [1.0, 1.0]}})
    payload = load_checkpoint(path)
    restored = build_world_model(payload["model_spec"], tiny_model_config())
    restored.load_state_dict(payload["world_model"])
    for a, b in zip(wm.state_dict().values(), restored.state_dict().values()):
        assert torch.equal(a, b)


def test_checkpoint_with_wrong_magic(tmp_path):
    path = str(tmp_path / "other.pt")
    torch.save({"magic": "something-else"}, path)
    with pytest.raises(DataFormatError) as info:
        load_checkpoint(path)
    assert info.value.section == "magic"


def test_action_bound_validation():
    with pytest.raises(ContractViolation):
        build_world_model({"obs_dim": 3, "act_dim": 2, "action_bound": [1.0, -1.0]}, tiny_model_config())


def test_prior_and_posterior_share_the_deterministic_path(make_world_model):
    wm = make_world_model()
    wm.train()
    gen = torch.Generator().manual_seed(5)
    prev = wm.posterior_step(wm.init_state(3), wm.initial_action(3),
                             wm.encode_obs(torch.randn(3, 3, generator=gen, dtype=torch.float64)))
    action = torch.rand(3, 2, generator=gen, dtype=torch.float64) - 0.5
    embed = wm.encode_obs(torch.randn(3, 3, generator=gen, dtype=torch.float64))
    assert torch.equal(wm.prior_step(prev, action).deter, wm.posterior_step(prev, action, embed).deter)


@pytest.mark.parametrize("prior_mode", ["lawm", "clap"])
def test_mixed_batch_reaches_every_submodule(make_world_model, make_trajectory, prior_mode):
    wm = make_world_model(prior_mode=prior_mode)
    trajs = [make_trajectory(T=4, seed=1), make_trajectory(T=4, labeled=False, seed=2)]
    loss, _ = model_loss(wm, trajs)
    loss.total.backward()
    if prior_mode == "lawm":
        assert wm.action_prior_head is None
    for name, child in wm.named_children():
        grads = [p.grad for p in child.parameters()]
        if not grads:
            continue
        assert any(g is not None and g.abs().sum() > 0 for g in grads), name
