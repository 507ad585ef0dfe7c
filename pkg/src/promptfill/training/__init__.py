from .checkpoint import (
    Checkpoint,
    CheckpointError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .loop import (
    BatchStream,
    PretrainResult,
    capture,
    model_from_checkpoint,
    pretrain,
    pretrain_losses,
    train_step,
)
from .optim import AdamW, AdamWHyper, adamw_step, clip_grad_norm, decays, lr_schedule
