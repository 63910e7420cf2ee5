from typing import Union
import json
import logging

logger = logging.getLogger(__name__)


class JsonHelper:
    """This class is for shrinking other classes.

    Every manifest, trace, config and report of a run is JSON, so reading/writing goes through here. Keys are sorted
    and the indentation is fixed so that two runs with the same config produce byte-identical files.
    """
    @staticmethod
    def dumps(obj: Union[dict, tuple, list]) -> str:
        """
        Serializes the given object the same way `write` does

        :param Union[dict, tuple, list] obj: The object to serialize
        :return str: The canonical JSON text (sorted keys, 4-space indent, trailing newline)
        """
        return json.dumps(obj, indent=4, sort_keys=True, allow_nan=False) + '\n'

    @staticmethod
    def write(filepath: str, obj: Union[dict, tuple, list], log: bool = True) -> None:
        """
        Writes the given object to a file

        :param filepath: The path to write to
        :param obj: The object containing the contents of the file
        :param log: Boolean whether to log the path or not
        :return:
        """
        if log:
            logger.info('Writing to file: %s', filepath)
        with open(filepath, 'w') as file:
            file.write(JsonHelper.dumps(obj))

    @staticmethod
    def read(filepath: str, log: bool = True) -> dict:
        """
        Reads the file with the given path

        :param str filepath: The path to read from
        :param bool log: Boolean whether to log the path or not
        :return dict:  The contents of the file
        """
        if log:
            logger.info('Reading from file: %s', filepath)
        with open(filepath, 'r') as file:
            return json.load(file)
