"""Environment parsing and credential hygiene."""

import pytest

from scomp_adapters.config import DEFAULT_MODELS, DEFAULT_TIMEOUT, STAGES, AdapterConfig
from scomp_adapters.errors import AdapterError


class TestFromEnv:
    def test_empty_environment_has_no_endpoints(self):
        config = AdapterConfig.from_env({})
        assert all(config.endpoint(stage) == "" for stage in STAGES)
        assert config.models == DEFAULT_MODELS
        assert config.timeout == DEFAULT_TIMEOUT
        assert config.seed == 0

    def test_shared_endpoint_with_stage_override(self):
        config = AdapterConfig.from_env({
            "SCOMP_ADAPTER_ENDPOINT": "http://host/v1",
            "SCOMP_ADAPTER_ENDPOINT_POSE": "http://pose-host/v2",
            "SCOMP_ADAPTER_MODEL_IMAGE_TO_3D": "my-mesh-model",
        })
        assert config.endpoint("describe") == "http://host/v1"
        assert config.endpoint("pose") == "http://pose-host/v2"
        assert config.model("image_to_3d") == "my-mesh-model"
        assert config.model("pose") == DEFAULT_MODELS["pose"]

    def test_numeric_variables(self):
        config = AdapterConfig.from_env({
            "SCOMP_ADAPTER_SEED": "42",
            "SCOMP_ADAPTER_TIMEOUT": "7.5",
            "SCOMP_ADAPTER_DEVICE": "cuda:1",
        })
        assert config.seed == 42
        assert config.timeout == 7.5
        assert config.device == "cuda:1"

    @pytest.mark.parametrize("env", [
        {"SCOMP_ADAPTER_SEED": "many"},
        {"SCOMP_ADAPTER_TIMEOUT": "soon"},
        {"SCOMP_ADAPTER_TIMEOUT": "-3"},
    ])
    def test_bad_numeric_variables_rejected(self, env):
        with pytest.raises(AdapterError):
            AdapterConfig.from_env(env)

    def test_repr_masks_the_api_key(self):
        config = AdapterConfig.from_env({"SCOMP_ADAPTER_API_KEY": "sk-very-secret"})
        assert "sk-very-secret" not in repr(config)
        assert config.api_key == "sk-very-secret"
