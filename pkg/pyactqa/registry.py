"""
Module for mirrored registries. A registry stores each entry both ways (key -> value and value -> key), which is how
a network keeps its layer names and their depths: `layers.get("head_fc1")` gives a depth and `layers.get(3)` gives
the layer name back.
"""
from typing import Callable, Hashable, Optional

from pyactqa.exceptions import RegistrationException
from pyactqa.synchronized import synchronized


@synchronized
class Registry:
    """
    Class for storing mirrored key:value pairs that can be queried later on. Entries added without a value
    are given one by the registry's value generator.
    """

    def __init__(self, default_value_generator: Optional[Callable] = None):
        """
        :param default_value_generator: Called with (registry, key) when a key is added without a value. Defaults to
        enumerating entries in insertion order, starting from 0.
        """
        if default_value_generator is None:
            default_value_generator = lambda registry, key: len(registry)

        self.default_value_generator = default_value_generator
        self.registry = {}
        self._order = []

    def get(self, key: Hashable):
        """
        Get an entry from the registry

        :param key: The key to query for

        :raises RegistrationException: if no entry is present
        :return: The registry entry for the key
        """
        if not self.contains(key):
            raise RegistrationException(f"No entry for {key} registered!", key)

        return self.registry[key]

    def add(self, key: Hashable, value=None):
        """
        Add an entry and its mirror. Keys and values share one namespace, so neither may already be present.

        :param key: The key to add an entry for
        :param value: Optional value, otherwise generated with `default_value_generator`
        """
        if self.contains(key):
            raise RegistrationException(f"{key} is already registered!", key)

        if value is None:
            value = self.default_value_generator(self, key)

        if self.contains(value):
            raise RegistrationException(f"{value} is already registered!", value)

        self.registry[key] = value
        self.registry[value] = key
        self._order.append(key)

    def contains(self, key: Hashable) -> bool:
        return key in self.registry

    def items(self):
        """
        :return: (key, value) pairs in insertion order, without their mirrors
        """
        return [(key, self.registry[key]) for key in self._order]

    def __len__(self):
        """
        :return: The number of entries, counting each mirrored pair once
        :rtype: int
        """
        return len(self._order)
