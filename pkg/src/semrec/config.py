"""Run configuration: dataclasses with defaults, INI file parsing, overrides.

Every knob has a documented default; unknown sections or keys in a config
file are rejected so typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field, fields
from typing import Any


class ConfigError(ValueError):
    """Bad config file or override (unknown key, unparsable value)."""


@dataclass
class CorpusConfig:
    min_core: int = 5            # k-core threshold on users and items
    iterative_core: bool = True  # repeat deletion until fixpoint
    on_bad_line: str = "abort"   # "abort" or "skip" malformed JSON lines
    recent_summaries: int = 5    # R most recent review summaries per user
    top_categories: int = 3      # most frequent purchased categories per user


@dataclass
class SynthConfig:
    clusters: int = 10
    items: int = 300
    users: int = 200
    min_len: int = 10
    max_len: int = 18
    in_cluster_prob: float = 0.85  # chance each step samples a preferred cluster
    words_per_cluster: int = 12


@dataclass
class BackboneConfig:
    dim: int = 128        # hidden width d
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 256
    dropout: float = 0.0  # keep 0 so training is RNG-free outside the sampler
    min_freq: int = 1     # vocabulary frequency cutoff


@dataclass
class QuantizerConfig:
    levels: int = 4                        # M levels per ID (paper runs 4 at full scale)
    codebook_size: int = 32                # N codewords per level (256 at full scale [PAPER §5.1.4])
    code_dim: int = 32                     # codeword width (256 at full scale [PAPER §5.1.4])
    proj_widths: tuple = (128, 64, 32)     # backbone dim -> code_dim ([4096,2048,1024,512,256] at full scale)
    collision_budget: int = 64             # P_max suffix tokens
    commitment_weight: float = 0.25        # gamma on the encoder-side quantization term
    kmeans_iters: int = 25                 # warm-start fit at initialization
    refresh_iters: int = 1                 # Lloyd steps per re-index refresh; one
                                           # gentle step tracks drift without
                                           # re-shuffling code identities


@dataclass
class AlignmentConfig:
    beta: float = 0.25           # token-level loss weight inside the alignment loss
    anchor_content: bool = True  # route the ID-loss gradient into the token view
                                 # only; a fully trainable trunk otherwise learns
                                 # to collapse all content text onto one point


@dataclass
class TaskConfig:
    history_cap: int = 20   # most recent H items spliced into prompts
    summary_cap: int = 24   # NL tokens kept from a preference target
    mix_seqrec: float = 4.0
    mix_user_pred: float = 1.0
    mix_preference: float = 1.0
    template_file: str = ""  # empty -> bundled templates


@dataclass
class TrainConfig:
    alpha: float = 1.0          # alignment weight in the total loss
    pretrain_epochs: int = 5
    pretrain_lr: float = 1e-3
    warmup_epochs: int = 10
    warmup_lr: float = 1e-3     # warm-up rate fixed by the experimental setup
    joint_epochs: int = 15
    joint_lr: float = 5e-4      # joint-stage AdamW rate, same source
    weight_decay: float = 0.01
    batch_size: int = 32
    reindex_interval: int = 1   # re-derive IDs every E joint epochs
    reindex_refit: bool = True  # Lloyd-refresh codebooks (warm start) at re-index
                                # so the index tracks trunk drift between epochs
    trunk_mode: str = "protect-nl"  # joint-stage policy: "full" trains every
                                # backbone weight; "protect-nl" pins NL token
                                # embeddings; "adapter" also freezes all but the
                                # top block (a small trunk forgets how to read
                                # content text when fully fine-tuned on
                                # semantic-token prompts)
    valid_users: int = 32       # per-epoch validation subsample (0 disables)
    grad_clip: float = 1.0      # 0 disables clipping


@dataclass
class EvalConfig:
    hr_k: tuple = (1, 5, 10)
    ndcg_k: tuple = (5, 10)
    beam_width: int = 20
    decode_mode: str = "beam"   # "beam" or "exhaustive"
    filter_history: bool = False


@dataclass
class RunConfig:
    seed: int = 7
    deterministic: bool = False  # single-threaded, reproducible mode
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    tasks: TaskConfig = field(default_factory=TaskConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @staticmethod
    def toy() -> "RunConfig":
        """Small preset sized for CPU smoke runs and the synthetic pipeline."""
        cfg = RunConfig()
        cfg.backbone = BackboneConfig(dim=64, n_layers=2, n_heads=4, max_seq_len=128)
        cfg.quantizer = QuantizerConfig(
            levels=3, codebook_size=24, code_dim=24, proj_widths=(64, 32, 24)
        )
        cfg.tasks = dataclasses.replace(cfg.tasks, history_cap=8)
        return cfg

    def validate(self) -> None:
        if self.training.alpha < 0:
            raise ConfigError("training.alpha must be >= 0")
        if self.alignment.beta < 0:
            raise ConfigError("alignment.beta must be >= 0")
        if self.training.reindex_interval < 1:
            raise ConfigError("training.reindex_interval must be >= 1")
        for name in ("pretrain_lr", "warmup_lr", "joint_lr"):
            if getattr(self.training, name) <= 0:
                raise ConfigError(f"training.{name} must be > 0")
        if self.quantizer.levels < 1 or self.quantizer.codebook_size < 2:
            raise ConfigError("quantizer needs levels >= 1 and codebook_size >= 2")
        if self.quantizer.proj_widths[0] != self.backbone.dim:
            raise ConfigError("quantizer.proj_widths must start at backbone.dim")
        if self.quantizer.proj_widths[-1] != self.quantizer.code_dim:
            raise ConfigError("quantizer.proj_widths must end at quantizer.code_dim")
        if self.backbone.dim % self.backbone.n_heads != 0:
            raise ConfigError("backbone.dim must be divisible by backbone.n_heads")
        if self.eval.decode_mode not in ("beam", "exhaustive"):
            raise ConfigError("eval.decode_mode must be 'beam' or 'exhaustive'")
        if self.training.trunk_mode not in ("full", "protect-nl", "adapter"):
            raise ConfigError(
                "training.trunk_mode must be 'full', 'protect-nl', or 'adapter'")
        if self.corpus.on_bad_line not in ("abort", "skip"):
            raise ConfigError("corpus.on_bad_line must be 'abort' or 'skip'")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                out[f.name] = {k.name: _plain(getattr(v, k.name)) for k in fields(v)}
            else:
                out[f.name] = _plain(v)
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        d = self.to_dict()
        parser["run"] = {
            k: _render(v) for k, v in d.items() if not isinstance(v, dict)
        }
        for section, kv in d.items():
            if isinstance(kv, dict):
                parser[section] = {k: _render(v) for k, v in kv.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _plain(v: Any) -> Any:
    return list(v) if isinstance(v, tuple) else v


def _render(v: Any) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(raw: str, ftype: Any, where: str) -> Any:
    raw = raw.strip()
    try:
        if ftype is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
        if ftype is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {where}: {raw!r}") from exc


def _section_fields(section_obj: Any) -> dict[str, Any]:
    return {f.name: f.type for f in fields(section_obj)}


_SCALAR_RUN_KEYS = {"seed": int, "deterministic": bool}


def apply_kv(cfg: RunConfig, dotted: str, raw: str) -> None:
    """Apply one 'section.key=value' override in place."""
    if "." not in dotted:
        if dotted in _SCALAR_RUN_KEYS:
            setattr(cfg, dotted, _coerce(raw, _SCALAR_RUN_KEYS[dotted], dotted))
            return
        raise ConfigError(f"unknown config key: {dotted}")
    section, key = dotted.split(".", 1)
    if section == "run":
        apply_kv(cfg, key, raw)
        return
    if not hasattr(cfg, section) or not dataclasses.is_dataclass(getattr(cfg, section)):
        raise ConfigError(f"unknown config section: {section}")
    sub = getattr(cfg, section)
    ftypes = {f.name: type(getattr(sub, f.name)) for f in fields(sub)}
    if key not in ftypes:
        raise ConfigError(f"unknown config key: {section}.{key}")
    setattr(sub, key, _coerce(raw, ftypes[key], dotted))


def load_config(path: str | None, overrides: list[str] | None = None,
                preset: str = "desk") -> RunConfig:
    """Build a RunConfig from a preset, an optional INI file, and overrides.

    Precedence: preset defaults < file values < command-line overrides.
    """
    if preset == "desk":
        cfg = RunConfig()
    elif preset == "toy":
        cfg = RunConfig.toy()
    else:
        raise ConfigError(f"unknown preset: {preset}")
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser[section].items():
                dotted = key if section == "run" else f"{section}.{key}"
                apply_kv(cfg, dotted if section != "run" else f"run.{key}", raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        dotted, raw = item.split("=", 1)
        apply_kv(cfg, dotted.strip(), raw)
    cfg.validate()
    return cfg
