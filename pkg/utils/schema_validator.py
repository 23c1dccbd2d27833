import json
from pathlib import Path
from typing import Any, Dict, List

from jsonschema import Draft7Validator
from utils.logger import logger

SCHEMA_ROOT = Path(__file__).parent.parent / "result_schemas"

# experiment name in a results document -> schema file under result_schemas/results
EXPERIMENT_SCHEMAS = {
    "cov-check": "cov_check",
    "extremes": "extremes",
    "dyson-check": "dyson_check",
    "geometry": "geometry",
    "intensity": "intensity",
}


class SchemaValidator:
    """JSON schema validator for emitted results documents"""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(SchemaValidator, cls).__new__(cls)
            cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if self._initialized:
            return

        self.validator = Draft7Validator
        self._schemas: Dict[str, Dict[str, Any]] = {}
        self._errors: List[Dict[str, Any]] = []
        self._initialized = True

    def load_schema(self, schema_type: str, schema_name: str) -> Dict[str, Any]:
        """
        Load schema from file

        Args:
            schema_type: Schema folder (e.g. 'results')
            schema_name: Name of schema file without extension

        Returns:
            Schema dictionary
        """
        cache_key = f"{schema_type}/{schema_name}"

        if cache_key in self._schemas:
            return self._schemas[cache_key]

        schema_path = SCHEMA_ROOT / schema_type / f"{schema_name}.json"

        if not schema_path.exists():
            raise FileNotFoundError(f"Schema file not found: {schema_path}")

        with open(schema_path, 'r') as f:
            schema = json.load(f)

        self.validator.check_schema(schema)
        self._schemas[cache_key] = schema
        return schema

    def schema_for(self, document: Dict[str, Any]) -> Dict[str, Any]:
        """Schema matching the document's experiment name"""
        experiment = document.get("experiment")
        if experiment not in EXPERIMENT_SCHEMAS:
            raise KeyError(f"No schema registered for experiment '{experiment}'")
        return self.load_schema("results", EXPERIMENT_SCHEMAS[experiment])

    def validate(self, data: Any, schema: Dict[str, Any]) -> bool:
        """
        Validate data against schema, collecting every error

        Returns:
            True if valid
        """
        self._errors.clear()

        for e in sorted(self.validator(schema).iter_errors(data), key=lambda err: list(err.path)):
            self._errors.append({
                "path": list(e.path),
                "message": e.message,
                "validator": e.validator,
                "validator_value": e.validator_value
            })
        return not self._errors

    def validate_document(self, document: Dict[str, Any]) -> bool:
        """Validate a results document against its experiment's schema"""
        try:
            schema = self.schema_for(document)
        except (KeyError, FileNotFoundError) as e:
            logger.error(f"Failed to validate document: {str(e)}")
            self._errors = [{"message": str(e)}]
            return False
        return self.validate(document, schema)

    def get_errors(self) -> List[Dict[str, Any]]:
        """Get validation errors"""
        return self._errors.copy()
