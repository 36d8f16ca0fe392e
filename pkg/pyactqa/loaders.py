"""
Module for the checkpoint Loader
"""
import io
import logging
from pathlib import Path

import numpy as np

from pyactqa.exceptions import FileException, SerializerException
from pyactqa.model import Network, network_entries, network_from_entries
from pyactqa.serializers import Checkpoint, CheckpointSerializer, Serializer, StringSerializer, \
    TensorSerializer, UInt32Serializer

logger = logging.getLogger("loaders")

DEFAULT_SERIALIZER_REGISTRY = {
    int: UInt32Serializer,
    str: StringSerializer,
    np.ndarray: TensorSerializer,
    Checkpoint: CheckpointSerializer
}


class Loader:
    """
    Loader class responsible for reading/writing checkpoints and serializing/deserializing their parts
    """

    def __init__(self, serializer_registry=None):
        """
        Initialise a new Loader object

        :param serializer_registry: Mapping of type : Serializer, used to lookup which serializer to use when
        serializing/deserializing. Overrides default serializers.
        """
        if serializer_registry is None:
            serializer_registry = DEFAULT_SERIALIZER_REGISTRY

        self.serializer_registry = {}
        self._serializer_pool = {}
        for cls, serializer in serializer_registry.items():
            self.register(cls, serializer)

    def deserialize(self, data, cls):
        """
        Deserialize an object of type :param cls: from a binary stream

        :param data: Readable binary stream
        :param cls: The class to deserialize to
        """
        return self.get_serializer(cls).deserialize(self, cls, data)

    def serialize(self, obj) -> bytes:
        cls = type(obj)
        if isinstance(obj, np.ndarray):
            cls = np.ndarray
        elif isinstance(obj, bool):
            raise SerializerException("Booleans have no checkpoint encoding", obj)

        return self.get_serializer(cls).serialize(self, obj)

    def read(self, path, cls=Checkpoint):
        """
        Read an object of type :cls: from the file at :param path:

        :param path: Path of the file to read from
        :param cls: The class to read into
        """
        self._validate_path(path)

        with open(path, 'rb') as file:
            return self.deserialize(io.BytesIO(file.read()), cls)

    def write(self, path, obj):
        """
        Write an object to the file at :param path:, replacing it if present

        :param path: Path of the file to write to; its directory must exist
        :param obj: The object to write
        """
        if not Path(path).parent.is_dir():
            raise FileException("Directory does not exist!", path)

        payload = self.serialize(obj)
        with open(path, 'wb') as file:
            file.write(payload)

        logger.debug("Wrote %d bytes to %s", len(payload), path)

    def register(self, cls: type, serializer: type):
        """
        Use :param serializer: for objects of type :param cls:, replacing any serializer registered before

        :raises SerializerException: if the serializer is not a Serializer subclass
        """
        if not (isinstance(serializer, type) and issubclass(serializer, Serializer)):
            raise SerializerException(f"{serializer} is not a Serializer!", serializer)

        self.serializer_registry[cls] = serializer

    def get_serializer(self, cls: type):
        """
        Returns the serializer registered for type :param cls:, instantiated once and pooled

        :raises SerializerException: if no serializer is registered for the type
        """
        if cls not in self.serializer_registry:
            raise SerializerException(f"No serializer registered for class {str(cls)}!", cls)

        serializer = self.serializer_registry[cls]
        if serializer not in self._serializer_pool:
            self._serializer_pool[serializer] = serializer()

        return self._serializer_pool[serializer]

    def _validate_path(self, path):
        if not Path(path).is_file():
            raise FileException("Invalid file path specified!", path)


def save_checkpoint(path, entries):
    Loader().write(path, Checkpoint(entries))


def load_checkpoint(path) -> Checkpoint:
    return Loader().read(path, Checkpoint)


def save_network(net: Network, path):
    """
    Write a network (config and parameters) as a checkpoint
    """
    save_checkpoint(path, network_entries(net))


def load_network(path) -> Network:
    return network_from_entries(load_checkpoint(path))
