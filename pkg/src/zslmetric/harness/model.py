"""Assembly of the parameter groups: extractor, embedding, classifier, proxies."""

from __future__ import annotations

import numpy as np

from .. import gradcore as gc
from .. import tuples as tp
from ..adversary import Classifier
from ..errors import ContractError
from ..extractor import FeatureExtractor, glorot_uniform
from ..gradcore import Tensor
from ..losses import EmbeddingLayer, metric_loss
from ..optim import Adam
from .config import ExperimentConfig


class ZslModel:
    def __init__(self, config: ExperimentConfig, train_classes):
        if not config.input_dim:
            raise ContractError("config.input_dim must be resolved before building a model")
        self.config = config
        self.train_classes = [int(c) for c in train_classes]
        self._class_pos = {c: i for i, c in enumerate(self.train_classes)}
        rng = np.random.default_rng([config.seed, 0])
        self.extractor = FeatureExtractor(config.extractor_config(), rng)
        d = self.extractor.feature_dim
        self.embedding = EmbeddingLayer(d, config.embedding_dim, rng, config.normalize_embedding)
        self.loss_config = config.metric_loss_config()
        self.classifier = None
        if config.mode in ("soft_adv", "adapt_adv"):
            self.classifier = Classifier(d, len(self.train_classes), rng,
                                         hidden_dim=config.classifier_hidden or None,
                                         dropout=config.dropout)
        self.proxies = None
        if config.loss == "proxy_nca":
            C, e = len(self.train_classes), config.embedding_dim
            self.proxies = Tensor(glorot_uniform(rng, e, C, (C, e)), tracked=True)

    @property
    def n_classes(self) -> int:
        return len(self.train_classes)

    def class_index(self, labels) -> np.ndarray:
        try:
            return np.array([self._class_pos[int(y)] for y in np.atleast_1d(labels)], dtype=np.intp)
        except KeyError as exc:
            raise ContractError(f"label {exc.args[0]} is not a training class") from None

    def named_params(self) -> dict[str, Tensor]:
        out = {f"extractor/{k}": v for k, v in self.extractor.named_params().items()}
        out.update({f"embedding/{k}": v for k, v in self.embedding.named_params().items()})
        if self.classifier is not None:
            out.update({f"classifier/{k}": v for k, v in self.classifier.named_params().items()})
        if self.proxies is not None:
            out["proxies"] = self.proxies
        return out

    def optimizer(self) -> Adam:
        cfg = self.config
        groups = {
            "extractor": (self.extractor.named_params().values(), cfg.lr_backbone),
            "embedding": (self.embedding.named_params().values(), cfg.lr_embedding),
        }
        if self.classifier is not None:
            groups["classifier"] = (self.classifier.named_params().values(), cfg.lr_classifier)
        if self.proxies is not None:
            groups["proxies"] = ([self.proxies], cfg.lr_proxy)
        return Adam(groups)

    def metric_loss(self, emb: Tensor, labels, tuples) -> Tensor:
        labels = np.asarray(labels)
        if self.proxies is not None:
            labels = self.class_index(labels)
        return metric_loss(self.config.loss, emb, labels, tuples, self.loss_config, self.proxies)

    def sampler(self):
        kind = self.config.resolved_sampler()
        margin = self.config.margin

        def sample(emb, labels, rng):
            batch = tp.FeatureBatch(emb, labels)
            if kind is None:
                return None
            if kind == "semihard":
                return tp.sample_semihard(batch, margin, rng)
            if kind == "hard":
                return tp.sample_hard(batch, rng)
            if kind == "easy":
                return tp.sample_easy(batch, 1, rng)
            return tp.sample_npair(batch, rng)

        return sample

    def embed(self, samples, batch_size: int = 256) -> np.ndarray:
        """Inference-mode embeddings of ``samples`` as a plain array."""
        X = np.asarray(samples, dtype=np.float64)
        out = []
        with gc.no_grad():
            for start in range(0, X.shape[0], batch_size):
                f = self.extractor(Tensor(X[start:start + batch_size]))
                out.append(self.embedding(f).data)
        return np.concatenate(out) if out else np.zeros((0, self.config.embedding_dim))

    def attention_weights(self, sample) -> list[np.ndarray]:
        with gc.no_grad():
            result = self.extractor.forward(Tensor(np.asarray(sample, dtype=np.float64)))
        return [w.data for w in result.weights]
