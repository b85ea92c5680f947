"""Sequential fine-tuning with MDS replay selection and LoRA-distilled refinement."""

__version__ = "0.1.0"
