"""Self-supervised pixel embeddings from optical flow, on a small numpy autodiff core."""

from . import autograd, embednet, evalviz, fileio, flowloss, synthgen, trainer

__version__ = "0.1.0"

__all__ = ["autograd", "embednet", "evalviz", "fileio", "flowloss", "synthgen", "trainer"]
