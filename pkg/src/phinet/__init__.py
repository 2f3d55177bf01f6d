"""Phi-Net: 3D CNN classification of MR image contrast, with its training,
preprocessing, baseline and evaluation tooling."""

from .arch import (
    ConvLayer,
    Network,
    ParamStore,
    PhiNetSpec,
    PoolLayer,
    ResNetMinusSpec,
    build_model,
    build_phinet,
    build_resnet_minus,
)
from .baseline import TemplateSet, build_templates, classify_by_template, pearson_cc
from .phantom import PhantomSpec, generate_dataset, generate_phantom
from .stats import accuracy, confusion_matrix, mcnemar_test
from .tensor import Tensor, backward, no_grad
from .training import Checkpoint, TrainConfig, fit, load_checkpoint, save_checkpoint
from .volume import (
    DatasetManifest,
    PreprocessConfig,
    Volume,
    preprocess_pipeline,
    read_nifti,
    write_nifti,
)

__version__ = "0.1.0"
