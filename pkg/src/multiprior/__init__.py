"""Multiprior: dual-resolution 3-D CNN with tissue priors and a dense CRF for head MRI."""

__version__ = "0.1.0"

from .volume_io import (LabelVolume, ProbabilityVolume, TissueProbabilityMap, Volume3D,  # noqa: E402
                        read_labels, read_nifti, read_tpm, write_nifti, write_tpm)
from .architectures import (MultipriorConfig, MultipriorModel, UNetConfig, UNetModel,  # noqa: E402
                            load_checkpoint, patch_geometry, save_checkpoint)
from .crf import CrfConfig, crf_refine  # noqa: E402
from .inference import SegmentOptions, plan_tiles, segment_volume  # noqa: E402
from .training import TrainConfig, train  # noqa: E402
