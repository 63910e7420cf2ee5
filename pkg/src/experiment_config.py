from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional
import hashlib
import logging

import jsonschema

from src.bde import AugmentConfig, TrainConfig
from src.dataset import SynthSpec
from src.exceptions import ConfigError, InexactMetaError
from src.json_helper import JsonHelper
from src.protonet import MetaTrainConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
VARIANTS = ('bde', 'pixels', 'coarse-direct', 'visual-only', 'semantic-only')
STAGE_SEED_OFFSETS = {'data': 0, 'bde': 1000, 'c2f': 2000, 'meta': 3000, 'eval': 4000}
# execution details that do not change results
UNHASHED_FIELDS = ('output_dir', 'n_jobs')

SCHEMA = {
    '$schema': 'http://json-schema.org/draft-07/schema#',
    'type': 'object',
    'required': ['schema_version'],
    'additionalProperties': False,
    'properties': {
        'schema_version': {'const': SCHEMA_VERSION},
        'data': {'type': 'object'},
        'dataset_path': {'type': ['string', 'null']},
        'train_coarse': {'type': 'array', 'items': {'type': 'integer', 'minimum': 0}, 'minItems': 1},
        'val_coarse': {'type': 'array', 'items': {'type': 'integer', 'minimum': 0}, 'minItems': 1},
        'test_coarse': {'type': 'array', 'items': {'type': 'integer', 'minimum': 0}, 'minItems': 1},
        'bde': {'type': 'object'},
        'augment': {'type': 'object'},
        'meta': {'type': 'object'},
        'n_s': {'type': ['integer', 'null'], 'minimum': 1},
        'n_way': {'type': 'integer', 'minimum': 1},
        'k_shots': {'type': 'array', 'items': {'type': 'integer', 'minimum': 1}, 'minItems': 1},
        'q_query': {'type': 'integer', 'minimum': 1},
        'eval_episodes': {'type': 'integer', 'minimum': 1},
        'seed': {'type': 'integer', 'minimum': 0},
        'output_dir': {'type': 'string'},
        'variant': {'enum': list(VARIANTS)},
        'full_scale': {'type': 'boolean'},
        'meta_val_selection': {'type': 'boolean'},
        'n_jobs': {'type': 'integer', 'minimum': -1, 'not': {'const': 0}},
    },
}


def desk_bde_config() -> TrainConfig:
    return TrainConfig(epochs=60, batch_size=64, base_lr=0.1, lr_milestones=[36, 48])


def desk_synth_spec() -> SynthSpec:
    """Coarse centers on 16 coordinates, fine offsets shared on the other 16, one brightness offset per sample."""
    return SynthSpec(coarse_spread=1.0, fine_spread=0.6, noise_sigma=0.15, fine_subspace_dim=16, brightness_sigma=1.0)


def desk_augment_config() -> AugmentConfig:
    return AugmentConfig(noise_sigma=0.1, dropout_prob=0.02, scale_jitter=0.05, shift_sigma=1.0)


def full_scale_bde_config(base: TrainConfig) -> TrainConfig:
    """The full-scale BDE recipe: 128-dim embedding, 200 epochs of 128, lr 0.3 cut at 120 and 160, k = 200."""
    return replace(base, embedding_dim=128, epochs=200, batch_size=128, base_lr=0.3, lr_milestones=[120, 160],
                   lr_factors=[0.1, 0.01], knn_k=200)


@dataclass
class ExperimentConfig:
    """Everything one run of the pipeline depends on.

    The default is the desk-scale synthetic benchmark: 13 coarse classes of 4 fine classes each, 8 of them for
    meta-training (coarse labels only), 2 for meta-validation and 3 for meta-test (fine labels). Its samples carry a
    per-sample brightness offset that the BDE augmentation is matched to, and the meta encoder starts from the BDE
    encoder where the variant trains one.
    """
    schema_version: int = SCHEMA_VERSION
    data: SynthSpec = field(default_factory=desk_synth_spec)
    dataset_path: Optional[str] = None
    train_coarse: List[int] = field(default_factory=lambda: list(range(8)))
    val_coarse: List[int] = field(default_factory=lambda: [8, 9])
    test_coarse: List[int] = field(default_factory=lambda: [10, 11, 12])
    bde: TrainConfig = field(default_factory=desk_bde_config)
    augment: AugmentConfig = field(default_factory=desk_augment_config)
    meta: MetaTrainConfig = field(default_factory=lambda: MetaTrainConfig(val_episodes=100, warm_start='bde'))
    n_s: Optional[int] = None
    n_way: int = 5
    k_shots: List[int] = field(default_factory=lambda: [1, 5])
    q_query: int = 15
    eval_episodes: int = 1000
    seed: int = 0
    output_dir: str = 'runs/default'
    variant: str = 'bde'
    full_scale: bool = False
    meta_val_selection: bool = True
    n_jobs: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> 'ExperimentConfig':
        """
        Validates a config mapping against the schema and builds the config

        :param dict d: The parsed JSON
        :return ExperimentConfig: The config
        """
        try:
            jsonschema.validate(d, SCHEMA)
        except jsonschema.ValidationError as e:
            raise ConfigError(f'invalid config at {list(e.absolute_path)}: {e.message}') from e
        d = dict(d)
        try:
            for key, cls in (('data', SynthSpec), ('bde', TrainConfig), ('augment', AugmentConfig),
                             ('meta', MetaTrainConfig)):
                if key in d:
                    d[key] = cls(**d[key])
            config = ExperimentConfig(**d)
        except TypeError as e:
            raise ConfigError(f'unknown config field: {e}') from e
        config.validate()
        return config

    @staticmethod
    def load(path: str) -> 'ExperimentConfig':
        try:
            d = JsonHelper.read(path)
        except (OSError, ValueError) as e:
            raise ConfigError(f'cannot read config {path}: {e}') from e
        return ExperimentConfig.from_dict(d)

    def save(self, path: str) -> None:
        JsonHelper.write(path, self.to_dict())

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f'variant must be one of {VARIANTS}, got {self.variant!r}')
        splits = [set(self.train_coarse), set(self.val_coarse), set(self.test_coarse)]
        if sum(len(s) for s in splits) != len(set.union(*splits)):
            raise ConfigError('train_coarse, val_coarse and test_coarse must be disjoint')
        try:
            jsonschema.validate(self.to_dict(), SCHEMA)
            self.data.validate()
            self.resolved_bde().validate()
            self.augment.validate()
            self.resolved_meta().validate()
        except jsonschema.ValidationError as e:
            raise ConfigError(f'invalid config at {list(e.absolute_path)}: {e.message}') from e
        except InexactMetaError as e:
            raise ConfigError(str(e)) from e
        if self.variant == 'coarse-direct' and self.n_way > len(self.train_coarse):
            raise ConfigError(f'coarse-direct episodes need N={self.n_way} training coarse classes, '
                              f'got {len(self.train_coarse)}')
        if self.n_way > len(self.val_coarse) * self.data.fine_per_coarse and self.meta_val_selection:
            logger.warning('validation split has fewer fine classes than N=%d', self.n_way)

    def stage_seed(self, stage: str) -> int:
        return self.seed + STAGE_SEED_OFFSETS[stage]

    def with_seed(self, seed: int) -> 'ExperimentConfig':
        return replace(self, seed=seed)

    def resolved_data(self) -> SynthSpec:
        return replace(self.data, seed=self.stage_seed('data'))

    def resolved_bde(self) -> TrainConfig:
        bde = full_scale_bde_config(self.bde) if self.full_scale else self.bde
        return replace(bde, seed=self.stage_seed('bde'),
                       visual_on=bde.visual_on and self.variant != 'semantic-only',
                       semantic_on=bde.semantic_on and self.variant != 'visual-only')

    def resolved_meta(self) -> MetaTrainConfig:
        return replace(self.meta, seed=self.stage_seed('meta'), n_way=self.n_way, q_query=self.q_query)

    def config_hash(self) -> str:
        return config_hash(self)


def config_hash(config: ExperimentConfig) -> str:
    """
    :param ExperimentConfig config: The config
    :return str: SHA-256 of the canonical JSON of the result-relevant fields, hex encoded
    """
    d = {key: value for key, value in config.to_dict().items() if key not in UNHASHED_FIELDS}
    return hashlib.sha256(JsonHelper.dumps(d).encode('utf-8')).hexdigest()
