"""QLoRA fine-tuning of a toy decoder on synthetic question-generation and
answer-evaluation data, with anonymized judge ranking."""

__version__ = "0.1.0"
