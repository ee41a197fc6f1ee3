from .metrics import EvalReport, evaluate
from .optim import AdamW, lr_schedule, optimizer_step
from .train import (Trainer, load_inference_model, run_training, train_step_static,
                    train_step_video)

__all__ = ["AdamW", "EvalReport", "Trainer", "evaluate", "load_inference_model", "lr_schedule",
           "optimizer_step", "run_training", "train_step_static", "train_step_video"]
