#pragma once

#include "sgh/augment.hpp"
#include "sgh/commands.hpp"
#include "sgh/common.hpp"
#include "sgh/config.hpp"
#include "sgh/datapipe.hpp"
#include "sgh/evalkit.hpp"
#include "sgh/hashindex.hpp"
#include "sgh/image.hpp"
#include "sgh/losses.hpp"
#include "sgh/netcore.hpp"
#include "sgh/trainer.hpp"
