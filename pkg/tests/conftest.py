import numpy as np
import pytest
import torch

from cycletts.config import ModelSettings, TrainConfig
from cycletts.corpus import CorpusData, StyleDimension, load_manifest
from cycletts.dsp import DspConfig
from cycletts.synthgen import CorpusSpec, generate_synthetic_corpus

torch.set_num_threads(1)


TABLE1_DIMENSIONS = (
    StyleDimension("speaker", ("spk1", "spk2")),
    StyleDimension("emotion", ("neutral", "sad", "angry", "happy")),
)


def table1_spec(per_cell: int, duration_range=(1.0, 1.5)) -> CorpusSpec:
    return CorpusSpec(
        dimensions=TABLE1_DIMENSIONS,
        cells={"spk1": {"neutral": per_cell},
               "spk2": {"neutral": per_cell, "sad": per_cell,
                        "angry": per_cell, "happy": per_cell}},
        duration_range=duration_range,
    )


@pytest.fixture(scope="session")
def dsp_config():
    return DspConfig()


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Table-1-shaped corpus, 12 utterances per non-empty cell."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    generate_synthetic_corpus(table1_spec(12), root, seed=101)
    return load_manifest(root)


@pytest.fixture(scope="session")
def tiny_data(tiny_corpus, dsp_config):
    data = CorpusData(tiny_corpus, dsp_config)
    data.warm_cache()
    return data


@pytest.fixture()
def tiny_train_config():
    return TrainConfig(
        n_pairs=3,
        main_epochs=4,
        finetune_epochs=0,
        checkpoint_interval=2,
        seed=17,
        free_run_cap_factor=3,
        model=ModelSettings(
            encoder_dim=32,
            decoder_dim=32,
            attention_dim=16,
            attention_rnn_dim=32,
            attention_location_filters=8,
            attention_location_kernel=7,
            prenet_dim=16,
            d_style=8,
            ref_channels=(8, 8, 16),
            ref_rnn_dim=16,
            classifier_hidden=16,
            reduction_factor=2,
        ),
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(33)
