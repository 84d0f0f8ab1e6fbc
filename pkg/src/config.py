"""Compositional Video Diffusion Toolkit - Configuration Module."""

from dataclasses import dataclass, field
from typing import Literal
import os


@dataclass
class ScheduleConfig:
    """Noise schedule configuration."""
    steps: int = 1000
    beta_start: float = 0.0085
    beta_end: float = 0.0120
    kind: Literal["linear", "scaled_linear"] = "linear"  # scaled_linear = linear in sqrt(beta)


@dataclass
class SamplerConfig:
    """DDIM sampling configuration."""
    ddim_steps: int = 50
    eta: float = 1.0
    guidance_scale: float = 7.5
    seed: int = 0

    def __post_init__(self):
        if self.ddim_steps < 1:
            raise ValueError(f"ddim_steps must be >= 1, got {self.ddim_steps}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


@dataclass
class TextConfig:
    """Stand-in text encoder configuration."""
    dim: int = 64
    vocab_seed: int = 0x5EED


@dataclass
class AttentionConfig:
    """Compositional cross-attention configuration."""
    blend_mode: Literal["literal", "renormalized"] = "literal"
    default_alpha: float = 0.5


@dataclass
class ReferenceConfig:
    """Reference frame encoder configuration."""
    frames: int = 2  # l
    in_channels: int = 4
    conv_channels: int = 320
    kernel_size: int = 3
    padding: int = 1
    mlp_hidden: int = 320
    out_dim: int = 1024
    activation: Literal["silu", "identity"] = "silu"
    conv_activation: Literal["silu", "identity"] = "identity"


@dataclass
class ModelConfig:
    """Toy denoiser configuration."""
    seed: int = 0
    latent_channels: int = 4
    hidden_channels: int = 32
    attention_dim: int = 32
    heads: int = 1
    latent_height: int = 16
    latent_width: int = 16
    ref_gain: float = 1.0
    refattn_position: Literal["after", "before"] = "after"  # relative to cross-attention


@dataclass
class FlowFilterConfig:
    """Optical-flow motion filter configuration."""
    s1: float = 0.25
    s2: float = 0.75
    normalize: bool = True  # divide mean displacement by frame width
    pyramid_levels: int = 2
    window: int = 5
    iterations: int = 3

    def __post_init__(self):
        if not 0.0 <= self.s1 < self.s2:
            raise ValueError(f"thresholds must satisfy 0 <= s1 < s2, got s1={self.s1}, s2={self.s2}")


@dataclass
class ClientConfig:
    """Text-generation client configuration."""
    base_url: str = "http://localhost:8080/generate"
    timeout: float = 30.0
    max_retries: int = 2
    groq_model: str = "llama-3.1-8b-instant"


@dataclass
class RuntimeConfig:
    """Execution configuration."""
    workers: int = 1
    show_progress: bool = False
    log_level: str = "INFO"


@dataclass
class Config:
    """Main application configuration."""
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    text: TextConfig = field(default_factory=TextConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    flow: FlowFilterConfig = field(default_factory=FlowFilterConfig)
    client: ClientConfig = field(default_factory=ClientConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    def __post_init__(self):
        # Environment overrides
        base_url = os.getenv("COMPVID_CLIENT_URL")
        if base_url:
            self.client.base_url = base_url
        workers = os.getenv("COMPVID_WORKERS")
        if workers:
            self.runtime.workers = max(1, int(workers))
        log_level = os.getenv("COMPVID_LOG_LEVEL")
        if log_level:
            self.runtime.log_level = log_level.upper()


# Global configuration instance
config = Config()
