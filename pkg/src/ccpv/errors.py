"""Exception hierarchy.

Every error carries a stable ``exit_code`` used by the command-line tools.
Code 1 is reserved for unexpected failures and 2 for usage errors.
"""


class CCPVError(Exception):
    exit_code = 1


# datasets
class MissingColumn(CCPVError):
    exit_code = 10


class UnknownChirality(CCPVError):
    exit_code = 11


class IdentityWithoutBothHands(CCPVError):
    exit_code = 12

    def __init__(self, identities):
        self.identities = list(identities)
        super().__init__(
            "identities without both LEFT and RIGHT samples: " + ", ".join(self.identities)
        )


class InsufficientSamples(CCPVError):
    exit_code = 13

    def __init__(self, identity, chirality, have, need):
        self.identity = identity
        self.chirality = chirality
        super().__init__(f"identity {identity!r} has {have} {chirality} samples, need {need}")


class BatchTooLarge(CCPVError):
    exit_code = 14


class DatasetIoError(CCPVError):
    exit_code = 15


# transforms / model
class DegenerateImage(CCPVError):
    exit_code = 20


class UnknownArch(CCPVError):
    exit_code = 21


class ShapeMismatch(CCPVError):
    exit_code = 22


class DimMismatch(CCPVError):
    exit_code = 23


# losses
class LabelOutOfRange(CCPVError):
    exit_code = 30


class DegenerateBatch(CCPVError):
    exit_code = 31


class NonFiniteLoss(CCPVError):
    exit_code = 32


# matching
class ZeroNormTemplate(CCPVError):
    exit_code = 40


class DuplicateIdentity(CCPVError):
    exit_code = 41


class UnknownIdentity(CCPVError):
    exit_code = 42


class EmptyGallery(CCPVError):
    exit_code = 43


class GalleryFormatError(CCPVError):
    exit_code = 44


# metrics
class EmptyProtocolSelection(CCPVError):
    exit_code = 50


class EmptyScores(CCPVError):
    exit_code = 51


class EmptyInput(CCPVError):
    exit_code = 52


# training
class InvalidFrameworkData(CCPVError):
    exit_code = 60


class ProtocolDataMissing(CCPVError):
    exit_code = 61


class CheckpointFormatError(CCPVError):
    exit_code = 62


EXIT_CODES = {
    cls.__name__: cls.exit_code
    for cls in [CCPVError, *CCPVError.__subclasses__()]
}
