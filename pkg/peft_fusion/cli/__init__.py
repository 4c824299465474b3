from peft_fusion.cli.app import app

__all__ = ["app"]
