import pytest

from attrser.config import config_from_dict
from attrser.synthetic import make_corpus


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """4 speakers x 4 emotions x 1 utterance, plus one noise utterance per speaker."""
    return make_corpus(tmp_path_factory.mktemp("tiny"), num_speakers=4, utts_per_class=1,
                       ood_per_speaker=1, duration=0.7, seed=1)


@pytest.fixture
def tiny_config(tiny_corpus, tmp_path):
    def build(**overrides):
        data = {
            "features": {"num_mel_bins": 32, "target_frames": 64},
            "data": {"manifest": str(tiny_corpus), "scheme": "iemocap4", "split": "kfold", "k": 4, "folds": [0]},
            "epochs": 2,
            "batch_size": 8,
            "out_dir": str(tmp_path / "runs"),
        }
        for key, value in overrides.items():
            section, _, field = key.partition("__")
            if field:
                data.setdefault(section, {})[field] = value
            else:
                data[section] = value
        return config_from_dict(data)

    return build


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
