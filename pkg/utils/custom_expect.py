import json
from pathlib import Path
from typing import Any, Dict, Sequence, Union

import numpy as np
from utils.logger import logger
from utils.schema_validator import SchemaValidator


class Expect:
    """Custom expectations for numerical and statistical checks"""

    def __init__(self):
        self.schema_validator = SchemaValidator()

    def _fail(self, error_message: str):
        logger.error(error_message)
        raise AssertionError(error_message)

    def to_match_schema(self, document: Union[Dict[str, Any], str, Path], schema_type: str = "results",
                        schema_name: str = None) -> None:
        """
        Validate a results document (or the JSON file holding it) against a schema file

        Args:
            document: Parsed document or path to a JSON file
            schema_type: Schema folder (e.g. 'results')
            schema_name: Schema file name; defaults to the one registered for the document's experiment
        """
        if isinstance(document, (str, Path)):
            with open(document, 'r') as f:
                document = json.load(f)

        if schema_name is None:
            schema = self.schema_validator.schema_for(document)
            schema_name = document.get("experiment")
        else:
            schema = self.schema_validator.load_schema(schema_type, schema_name)

        if not self.schema_validator.validate(document, schema):
            errors = self.schema_validator.get_errors()
            self._fail(f"Schema validation failed for {schema_type}/{schema_name}:\n{json.dumps(errors, indent=2)}")

        logger.info(f"Document matches schema: {schema_type}/{schema_name}")

    def to_be_within_standard_errors(self, actual: float, expected: float, std_error: float, k: float = 4.0,
                                     slack: float = 0.0) -> None:
        """Check |actual - expected| <= k·SE + slack"""
        if std_error < 0:
            self._fail(f"Standard error must be non-negative, got {std_error}")
        distance = abs(actual - expected)
        if distance > k * std_error + slack:
            self._fail(f"Expected {actual} within {k} SE ({std_error:.3e}) + {slack} of {expected}, off by {distance:.3e}")
        logger.debug(f"{actual} is within {k} SE of {expected}")

    def to_be_close(self, actual, expected, rel: float = 1e-9, abs_tol: float = 0.0) -> None:
        """Check closeness element-wise (scalars or arrays)"""
        if not np.allclose(actual, expected, rtol=rel, atol=abs_tol):
            worst = np.max(np.abs(np.asarray(actual, dtype=float) - np.asarray(expected, dtype=float)))
            self._fail(f"Expected values close to {expected} (rel {rel}, abs {abs_tol}), largest difference {worst:.3e}")
        logger.debug("Values are close")

    def to_be_non_increasing(self, values: Sequence[float], slack: float = 0.0) -> None:
        """Check values[i+1] <= values[i] + slack"""
        steps = np.diff(np.asarray(values, dtype=float))
        if np.any(steps > slack):
            self._fail(f"Expected a non-increasing sequence (slack {slack}), got {list(values)}")
        logger.debug(f"Sequence is non-increasing: {list(values)}")

    def to_be_greater_than_or_equal(self, actual, expected) -> None:
        """Check if actual is greater than or equal to expected"""
        if actual < expected:
            self._fail(f"Expected {actual} to be greater than or equal to {expected}")
        logger.debug(f"{actual} is greater than or equal to {expected}")

    def to_be_less_than_or_equal(self, actual, expected) -> None:
        """Check if actual is less than or equal to expected"""
        if actual > expected:
            self._fail(f"Expected {actual} to be less than or equal to {expected}")
        logger.debug(f"{actual} is less than or equal to {expected}")

    def to_be_truthy(self, value) -> None:
        """Check if value is truthy"""
        if not value:
            self._fail(f"Expected value to be truthy, but got {value}")
        logger.debug("Value is truthy")

    def to_equal(self, actual, expected) -> None:
        """Check if actual equals expected (arrays compared element-wise)"""
        if isinstance(actual, np.ndarray) or isinstance(expected, np.ndarray):
            equal = np.array_equal(actual, expected)
        else:
            equal = actual == expected
        if not equal:
            self._fail(f"Expected {expected}, but got {actual}")
        logger.debug(f"{actual} equals {expected}")

    def to_contain(self, container, item) -> None:
        """Check if container contains item"""
        if item not in container:
            self._fail(f"Expected {container} to contain {item}")
        logger.debug(f"Container contains {item}")


# Create singleton instance
expect = Expect()
