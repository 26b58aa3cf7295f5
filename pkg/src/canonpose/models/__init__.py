from .stage1 import Stage1Config, Stage1Net
from .stage2 import Critic, Generator, Stage2Config

__all__ = ["Critic", "Generator", "Stage1Config", "Stage1Net", "Stage2Config"]
