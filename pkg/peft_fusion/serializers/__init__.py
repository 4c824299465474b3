from peft_fusion.exceptions import ConfigError
from peft_fusion.serializers.base import BaseSerializer
from peft_fusion.serializers.json_serializer import JSONSerializer
from peft_fusion.serializers.orjson_serializer import ORJSONSerializer

__all__ = [
    "SERIALIZERS",
    "BaseSerializer",
    "JSONSerializer",
    "ORJSONSerializer",
    "default_serializer",
    "get_serializer",
]

SERIALIZERS: dict[str, type[BaseSerializer]] = {
    "orjson": ORJSONSerializer,
    "json": JSONSerializer,
}


def default_serializer() -> BaseSerializer:
    return ORJSONSerializer()


def get_serializer(name: str) -> BaseSerializer:
    """Serializer registered under ``name`` (``output.serializer``)."""
    try:
        return SERIALIZERS[name]()
    except KeyError:
        raise ConfigError(
            f"unknown serializer '{name}' (choose from {', '.join(SERIALIZERS)})", key="output.serializer"
        ) from None
