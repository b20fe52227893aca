import pytest

from localagg.config import TrainConfig, format_config, load_config, parse_config
from localagg.errors import ConfigError
from localagg.neighbors import BackgroundMode, CloseMode


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.tau, cfg.dim, cfg.weight_decay, cfg.mix, cfg.momentum) == (0.07, 128, 1e-4, 0.5, 0.9)
    assert cfg.background_mode is BackgroundMode.KNN and cfg.close_mode is CloseMode.ENSEMBLE


def test_parse_with_aliases_and_comments():
    cfg = parse_config("""
        # toy run
        tau = 0.1
        lambda = 0.001   # weight decay
        t = 0.3
        H = 2
        m = 16
        D = 32
        K = 5
        lr_milestones = 10, 20
        background_mode = all
        close_mode = knn_close
    """)
    assert cfg.tau == 0.1 and cfg.weight_decay == 0.001 and cfg.mix == 0.3
    assert (cfg.n_clusterings, cfg.n_clusters, cfg.dim, cfg.knn_k) == (2, 16, 32, 5)
    assert cfg.lr_milestones == (10, 20)
    assert cfg.background_mode is BackgroundMode.ALL and cfg.close_mode is CloseMode.KNN_CLOSE


@pytest.mark.parametrize("text", ["bogus = 1", "tau 0.1", "dim = many", "close_mode = NEAREST"])
def test_bad_lines_raise(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.mark.parametrize("changes", [dict(tau=0.0), dict(mix=1.5), dict(warm_start_epochs=50),
                                     dict(momentum=1.0), dict(recluster_unit="hour"),
                                     dict(cluster_source="disk"), dict(n_clusterings=0)])
def test_validate_rejects(changes):
    with pytest.raises(ConfigError):
        TrainConfig().replace(**changes).validate()


def test_validate_against_bank_size():
    with pytest.raises(ConfigError):
        TrainConfig(k=500).validate(100)
    TrainConfig(k=100).validate(100)


def test_scaled_defaults():
    cfg = TrainConfig()
    assert cfg.resolved_k(1800) == 32 and cfg.resolved_k(30000) == 100
    assert cfg.resolved_m(1800) == 14 and cfg.resolved_knn_k(1800) == 180


def test_format_round_trip(tmp_path):
    cfg = TrainConfig(tau=0.2, lr_milestones=(3, 7), n_clusters=12, close_mode="SELF", hidden_dims=(32,))
    path = tmp_path / "cfg.txt"
    path.write_text(format_config(cfg))
    assert load_config(path) == cfg
