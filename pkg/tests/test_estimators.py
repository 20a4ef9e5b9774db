import numpy as np
import pytest
from sklearn.base import clone

from gsure_ma.adaptation import AdaptationConfig, adapt, reconstruct
from gsure_ma.data_io import make_split
from gsure_ma.estimators import Adapter, Reconstructor
from gsure_ma.exceptions import ContractError, DimensionError
from gsure_ma.operators import simulate_acquisition
from gsure_ma.validation import (check_image, check_image_stack, check_kspace, check_operator,
                                 check_positive)


@pytest.fixture(scope="module")
def fitted():
    split = make_split(2, 0, 1, 0, 16, 16, 4)
    rec = Reconstructor(blocks=1, features=4, unrolls=2, epochs=3, num_coils=2).fit(split.images("train"))
    x = split.images("test")[0]
    A = rec.scenario().operator(16, 16, x, 3)
    return rec, A, x, simulate_acquisition(A, x, 4)


def test_params_and_clone():
    r = Reconstructor(features=8, lr=2e-3)
    assert r.get_params()["features"] == 8
    c = clone(r)
    assert c.get_params() == r.get_params() and not hasattr(c, "net_")
    assert r.set_params(blocks=2).blocks == 2


def test_fit_records_loss_curve(fitted):
    rec = fitted[0]
    assert rec.loss_curve_.shape == (3,) and np.all(np.isfinite(rec.loss_curve_))


def test_predict_matches_functional_api(fitted):
    rec, A, x, y = fitted
    np.testing.assert_array_equal(rec.predict(A, y), reconstruct(rec.net_, A, A.adjoint(y.values)))


def test_unfitted_and_bad_inputs(fitted):
    rec, A, x, y = fitted
    with pytest.raises(ContractError, match="not fitted"):
        Reconstructor().predict(A, y)
    with pytest.raises(DimensionError):
        rec.predict(A, y.values[:1])
    with pytest.raises(ContractError):
        rec.predict("operator", y)
    with pytest.raises(ValueError):
        Reconstructor(architecture="unet").fit([x])


def test_adapter_matches_adapt_and_leaves_reconstructor(fitted):
    rec, A, x, y = fitted
    before = rec.net_.params.state()
    ad = Adapter(rec, "gsure", epochs=3, lr=1e-3, seed=2).fit(A, y, oracle=x)
    for k, v in rec.net_.params.state().items():
        np.testing.assert_array_equal(v, before[k])
    net = clone(rec)._network()
    net.params.load_state(before)
    ref = adapt(net, A, y, AdaptationConfig("gsure", 3, 1e-3, 2, ad_gsure(ad)), x)
    assert [r.total_loss for r in ref.records] == [r.total_loss for r in ad.result_.records]
    np.testing.assert_array_equal(ad.predict(y), reconstruct(net, A, A.adjoint(y.values)))


def ad_gsure(ad):
    from gsure_ma.losses import GsureConfig
    return GsureConfig(mc_probes=ad.mc_probes, epsilon_scale=ad.epsilon_scale, pinv_reg=ad.pinv_reg,
                       proj_iters=20)


def test_adapter_requires_fitted_reconstructor(fitted):
    _, A, _, y = fitted
    with pytest.raises(ValueError):
        Adapter().fit(A, y)
    with pytest.raises(ContractError):
        Adapter(Reconstructor()).fit(A, y)


def test_validation_helpers(fitted):
    _, A, _, y = fitted
    with pytest.raises(DimensionError):
        check_image(np.ones(4))
    with pytest.raises(ContractError):
        check_image(np.full((2, 2), np.nan))
    with pytest.raises(ContractError):
        check_image_stack([])
    with pytest.raises(DimensionError):
        check_image_stack([np.ones((2, 2)), np.ones((3, 3))])
    assert check_image(np.ones((2, 2))).dtype == np.complex128
    assert check_kspace(y, A).shape == A.coils.shape
    with pytest.raises(ContractError):
        check_kspace(np.full(A.coils.shape, np.inf), A)
    assert check_operator(A) is A
    with pytest.raises(ContractError):
        check_positive(0, "lr")
